#include "usam/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "usam/error.hpp"

namespace usam {

void BackboneConfig::validate() const {
  if (depth < 1) throw InvalidValue("backbone depth must be >= 1");
  if (heads < 1 || embed_dim % heads != 0) {
    throw InvalidValue("backbone embed_dim " + std::to_string(embed_dim) +
                       " not divisible by heads " + std::to_string(heads));
  }
  if (window_size < 0) throw InvalidValue("window_size must be >= 0");
  for (auto i : global_attn_indexes) {
    if (i < 0 || i >= depth) {
      throw InvalidValue("global attention index " + std::to_string(i) + " out of range");
    }
  }
}

ModelConfig ModelConfig::vit_b_full() { return ModelConfig{}; }

ModelConfig ModelConfig::tiny(int64_t image_size) {
  ModelConfig c;
  c.backbone.variant = "tiny";
  c.backbone.embed_dim = 192;
  c.backbone.depth = 2;
  c.backbone.heads = 4;
  c.backbone.window_size = 2;
  c.backbone.global_attn_indexes = {1};
  c.dim = 64;
  c.image_size = image_size;
  c.decoder_heads = 4;
  c.decoder_mlp_dim = 256;
  return c;
}

ModelConfig ModelConfig::for_variant(const std::string& variant, int64_t image_size) {
  if (variant == "tiny") return tiny(image_size);
  if (variant == "vit-b-full") {
    auto c = vit_b_full();
    c.image_size = image_size;
    return c;
  }
  throw InvalidValue("unknown backbone variant '" + variant + "'");
}

void ModelConfig::validate() const {
  backbone.validate();
  if (dim % 8 != 0 || dim < 8) throw InvalidValue("dim must be a positive multiple of 8");
  if (backbone.embed_dim != 3 * dim) {
    throw InvalidValue("backbone embed_dim must equal 3 * dim (" + std::to_string(3 * dim) + ")");
  }
  if (num_classes < 2) throw InvalidValue("num_classes must be >= 2");
  if (image_size < 16 || image_size % 16 != 0) {
    throw InvalidValue("image_size must be a positive multiple of 16");
  }
  if (skips < 0 || skips > 4) throw InvalidValue("skips must be in 0..4");
  if (decoder_depth < 1) throw InvalidValue("decoder_depth must be >= 1");
  if (decoder_heads < 1 || (dim / 2) % decoder_heads != 0) {
    throw InvalidValue("decoder heads must divide dim / 2");
  }
}

std::string ModelConfig::tag() const {
  std::ostringstream os;
  os << backbone.variant << "-" << to_string(decoder_variant) << "-n" << num_classes << "-s"
     << skips << "-" << image_size;
  return os.str();
}

void TrainConfig::validate() const {
  model.validate();
  if (batch_size < 1) throw InvalidValue("batch_size must be >= 1");
  if (!(lr_encoder > 0.0) || !(lr_decoder > 0.0)) {
    throw InvalidValue("learning rates must be positive");
  }
  if (steps < 0) throw InvalidValue("steps must be >= 0");
  if (k_points < 0) throw InvalidValue("k_points must be >= 0");
  if (w_ce < 0.0 || w_dice < 0.0) throw InvalidValue("loss weights must be >= 0");
}

std::string to_string(DecoderVariant v) {
  return v == DecoderVariant::kUShaped ? "usam" : "initial";
}

DecoderVariant decoder_variant_from_string(const std::string& s) {
  if (s == "usam") return DecoderVariant::kUShaped;
  if (s == "initial") return DecoderVariant::kInitial;
  throw InvalidValue("unknown decoder variant '" + s + "'");
}

json to_json(const BackboneConfig& c) {
  return json{{"variant", c.variant},
              {"embed_dim", c.embed_dim},
              {"depth", c.depth},
              {"heads", c.heads},
              {"mlp_ratio", c.mlp_ratio},
              {"window_size", c.window_size},
              {"global_attn_indexes", c.global_attn_indexes}};
}

json to_json(const ModelConfig& c) {
  return json{{"backbone", to_json(c.backbone)},
              {"dim", c.dim},
              {"num_classes", c.num_classes},
              {"image_size", c.image_size},
              {"skips", c.skips},
              {"decoder_variant", to_string(c.decoder_variant)},
              {"decoder_depth", c.decoder_depth},
              {"decoder_heads", c.decoder_heads},
              {"decoder_mlp_dim", c.decoder_mlp_dim}};
}

json to_json(const TrainConfig& c) {
  return json{{"variant", c.model.backbone.variant},
              {"image_size", c.model.image_size},
              {"skips", c.model.skips},
              {"num_classes", c.model.num_classes},
              {"decoder_variant", to_string(c.model.decoder_variant)},
              {"batch_size", c.batch_size},
              {"lr_encoder", c.lr_encoder},
              {"lr_decoder", c.lr_decoder},
              {"cosine_decay", c.cosine_decay},
              {"steps", c.steps},
              {"seed", c.seed},
              {"k_points", c.k_points},
              {"w_ce", c.w_ce},
              {"w_dice", c.w_dice},
              {"augment", c.augment},
              {"checkpoint_every", c.checkpoint_every},
              {"log_every", c.log_every}};
}

BackboneConfig backbone_from_json(const json& j) {
  BackboneConfig c;
  c.variant = j.at("variant").get<std::string>();
  c.embed_dim = j.at("embed_dim").get<int64_t>();
  c.depth = j.at("depth").get<int64_t>();
  c.heads = j.at("heads").get<int64_t>();
  c.mlp_ratio = j.at("mlp_ratio").get<double>();
  c.window_size = j.at("window_size").get<int64_t>();
  c.global_attn_indexes = j.at("global_attn_indexes").get<std::vector<int64_t>>();
  return c;
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  c.backbone = backbone_from_json(j.at("backbone"));
  c.dim = j.at("dim").get<int64_t>();
  c.num_classes = j.at("num_classes").get<int64_t>();
  c.image_size = j.at("image_size").get<int64_t>();
  c.skips = j.at("skips").get<int64_t>();
  c.decoder_variant = decoder_variant_from_string(j.at("decoder_variant").get<std::string>());
  c.decoder_depth = j.at("decoder_depth").get<int64_t>();
  c.decoder_heads = j.at("decoder_heads").get<int64_t>();
  c.decoder_mlp_dim = j.at("decoder_mlp_dim").get<int64_t>();
  c.validate();
  return c;
}

TrainConfig train_config_from_json(const json& j) {
  if (!j.is_object()) throw InvalidValue("train config must be a JSON object");
  static const std::set<std::string> kKnown = {
      "variant",   "image_size", "skips",      "num_classes",  "decoder_variant",
      "batch_size", "lr_encoder", "lr_decoder", "cosine_decay", "steps",
      "seed",      "k_points",   "w_ce",       "w_dice",       "augment",
      "checkpoint_every", "log_every"};
  for (const auto& [key, _] : j.items()) {
    if (!kKnown.count(key)) throw InvalidValue("unknown train config key '" + key + "'");
  }

  TrainConfig c;
  c.model = ModelConfig::for_variant(j.value("variant", std::string("vit-b-full")),
                                     j.value("image_size", int64_t{224}));
  c.model.skips = j.value("skips", c.model.skips);
  c.model.num_classes = j.value("num_classes", c.model.num_classes);
  c.model.decoder_variant =
      decoder_variant_from_string(j.value("decoder_variant", std::string("usam")));
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr_encoder = j.value("lr_encoder", c.lr_encoder);
  c.lr_decoder = j.value("lr_decoder", c.lr_decoder);
  c.cosine_decay = j.value("cosine_decay", c.cosine_decay);
  c.steps = j.value("steps", c.steps);
  c.seed = j.value("seed", c.seed);
  c.k_points = j.value("k_points", c.k_points);
  c.w_ce = j.value("w_ce", c.w_ce);
  c.w_dice = j.value("w_dice", c.w_dice);
  c.augment = j.value("augment", c.augment);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.log_every = j.value("log_every", c.log_every);
  c.validate();
  return c;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  try {
    return train_config_from_json(json::parse(in));
  } catch (const json::exception& e) {
    throw InvalidValue("malformed config " + path.string() + ": " + e.what());
  }
}

bool same_architecture(const ModelConfig& a, const ModelConfig& b) {
  return to_json(a) == to_json(b);
}

}  // namespace usam
