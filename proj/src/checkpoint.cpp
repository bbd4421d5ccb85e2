#include "usam/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "usam/error.hpp"

namespace usam {

namespace F = torch::nn::functional;

namespace {

std::string dtype_name(torch::ScalarType t) {
  switch (t) {
    case torch::kFloat32: return "F32";
    case torch::kFloat64: return "F64";
    case torch::kInt64: return "I64";
    default: throw IoError("unsupported tensor dtype for archive");
  }
}

torch::ScalarType dtype_from_name(const std::string& s) {
  if (s == "F32") return torch::kFloat32;
  if (s == "F64") return torch::kFloat64;
  if (s == "I64") return torch::kInt64;
  if (s == "F16") return torch::kFloat16;
  if (s == "BF16") return torch::kBFloat16;
  throw IoError("unsupported archive dtype " + s);
}

}  // namespace

void write_archive(const std::filesystem::path& path, const TensorArchive& archive) {
  json header = json::object();
  std::vector<torch::Tensor> blobs;
  uint64_t offset = 0;
  for (const auto& [name, tensor] : archive.tensors) {
    auto t = tensor.detach().cpu().contiguous();
    if (t.scalar_type() != torch::kFloat64 && t.scalar_type() != torch::kInt64) {
      t = t.to(torch::kFloat32);
    }
    const uint64_t nbytes = t.numel() * t.element_size();
    header[name] = {{"dtype", dtype_name(t.scalar_type())},
                    {"shape", t.sizes().vec()},
                    {"data_offsets", {offset, offset + nbytes}}};
    offset += nbytes;
    blobs.push_back(t);
  }
  if (!archive.metadata.empty()) header["__metadata__"] = archive.metadata;
  std::string text = header.dump();
  text.append((8 - text.size() % 8) % 8, ' ');

  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write " + tmp.string());
    const uint64_t len = text.size();
    out.write(reinterpret_cast<const char*>(&len), 8);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& t : blobs) {
      out.write(static_cast<const char*>(t.data_ptr()),
                static_cast<std::streamsize>(t.numel() * t.element_size()));
    }
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

TensorArchive read_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), 8);
  if (!in || len > (uint64_t{1} << 31)) throw IoError(path.string() + ": bad archive header");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw IoError(path.string() + ": truncated header");
  json header;
  try {
    header = json::parse(text);
  } catch (const json::exception& e) {
    throw IoError(path.string() + ": malformed header: " + e.what());
  }
  const auto data_start = static_cast<std::streamoff>(8 + len);
  in.seekg(0, std::ios::end);
  const auto file_size = static_cast<uint64_t>(in.tellg());

  TensorArchive archive;
  for (const auto& [name, entry] : header.items()) {
    if (name == "__metadata__") {
      archive.metadata = entry.get<std::map<std::string, std::string>>();
      continue;
    }
    const auto type = dtype_from_name(entry.at("dtype").get<std::string>());
    const auto shape = entry.at("shape").get<std::vector<int64_t>>();
    const auto offsets = entry.at("data_offsets").get<std::vector<uint64_t>>();
    if (offsets.size() != 2 || offsets[1] < offsets[0] || 8 + len + offsets[1] > file_size) {
      throw IoError(path.string() + ": bad byte range for " + name);
    }
    auto t = torch::empty(shape, type);
    if (static_cast<uint64_t>(t.numel() * t.element_size()) != offsets[1] - offsets[0]) {
      throw IoError(path.string() + ": size mismatch for " + name);
    }
    in.seekg(data_start + static_cast<std::streamoff>(offsets[0]));
    in.read(static_cast<char*>(t.data_ptr()), static_cast<std::streamsize>(offsets[1] - offsets[0]));
    if (!in) throw IoError(path.string() + ": truncated data for " + name);
    if (type == torch::kFloat16 || type == torch::kBFloat16) t = t.to(torch::kFloat32);
    archive.tensors.emplace(name, t);
  }
  return archive;
}

namespace {

std::map<std::string, torch::Tensor> model_state(USamImpl& model) {
  std::map<std::string, torch::Tensor> state;
  for (const auto& item : model.named_parameters()) state[item.key()] = item.value();
  for (const auto& item : model.named_buffers()) state[item.key()] = item.value();
  return state;
}

CheckpointMeta meta_from(const std::map<std::string, std::string>& md, const std::string& where) {
  if (!md.count("model_config")) throw IncompatibleCheckpoint(where + ": no model_config metadata");
  CheckpointMeta meta;
  try {
    meta.model = model_config_from_json(json::parse(md.at("model_config")));
    if (md.count("train_config")) {
      meta.train = train_config_from_json(json::parse(md.at("train_config")));
    }
    meta.step = md.count("step") ? std::stoll(md.at("step")) : 0;
    if (md.count("class_names")) {
      meta.class_names = json::parse(md.at("class_names")).get<std::vector<std::string>>();
    }
  } catch (const json::exception& e) {
    throw IncompatibleCheckpoint(where + ": malformed metadata: " + e.what());
  }
  meta.tag = md.count("config_tag") ? md.at("config_tag") : meta.model.tag();
  return meta;
}

}  // namespace

void save_model_weights(const std::filesystem::path& path, USamImpl& model,
                        const std::map<std::string, std::string>& metadata) {
  TensorArchive archive;
  archive.tensors = model_state(model);
  archive.metadata = metadata;
  write_archive(path, archive);
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  TensorArchive archive;
  USam model = checkpoint.model;
  archive.tensors = model_state(*model);
  for (const auto& [name, moments] : checkpoint.adam_moments) {
    archive.tensors["optimizer." + name + ".exp_avg"] = moments.first;
    archive.tensors["optimizer." + name + ".exp_avg_sq"] = moments.second;
  }
  const auto& meta = checkpoint.meta;
  archive.metadata["format"] = "usam-checkpoint-1";
  archive.metadata["model_config"] = to_json(meta.model).dump();
  if (meta.train) archive.metadata["train_config"] = to_json(*meta.train).dump();
  archive.metadata["step"] = std::to_string(meta.step);
  archive.metadata["adam_step"] = std::to_string(checkpoint.adam_step);
  archive.metadata["class_names"] = json(meta.class_names).dump();
  archive.metadata["config_tag"] = meta.tag.empty() ? meta.model.tag() : meta.tag;
  write_archive(path, archive);
}

CheckpointMeta read_checkpoint_meta(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), 8);
  if (!in || len > (uint64_t{1} << 31)) throw IoError(path.string() + ": bad archive header");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw IoError(path.string() + ": truncated header");
  json header;
  try {
    header = json::parse(text);
  } catch (const json::exception& e) {
    throw IoError(path.string() + ": malformed header: " + e.what());
  }
  if (!header.contains("__metadata__")) {
    throw IncompatibleCheckpoint(path.string() + ": no metadata record");
  }
  return meta_from(header["__metadata__"].get<std::map<std::string, std::string>>(), path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  auto archive = read_archive(path);
  Checkpoint ckpt;
  ckpt.meta = meta_from(archive.metadata, path.string());
  if (archive.metadata.count("adam_step")) ckpt.adam_step = std::stoll(archive.metadata["adam_step"]);
  ckpt.model = USam(ckpt.meta.model);

  std::vector<std::string> problems;
  torch::NoGradGuard no_grad;
  for (auto& [name, target] : model_state(*ckpt.model)) {
    auto it = archive.tensors.find(name);
    if (it == archive.tensors.end()) {
      problems.push_back("missing " + name);
    } else if (it->second.sizes() != target.sizes()) {
      problems.push_back("mis-shaped " + name);
    } else {
      target.copy_(it->second);
    }
  }
  if (!problems.empty()) {
    std::string msg = path.string() + ": checkpoint does not match its config:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw IncompatibleCheckpoint(msg);
  }
  const std::string prefix = "optimizer.";
  for (const auto& [name, tensor] : archive.tensors) {
    if (!name.starts_with(prefix) || !name.ends_with(".exp_avg")) continue;
    const auto param = name.substr(prefix.size(), name.size() - prefix.size() - 8);
    auto sq = archive.tensors.find(prefix + param + ".exp_avg_sq");
    if (sq == archive.tensors.end()) throw IncompatibleCheckpoint("incomplete optimizer state for " + param);
    ckpt.adam_moments[param] = {tensor, sq->second};
  }
  return ckpt;
}

namespace {

bool expected_from_pretrained(const std::string& name) {
  return name.starts_with("image_encoder.") || name.starts_with("prompt_encoder.") ||
         name.starts_with("mask_decoder.");
}

// Returns an adapted copy of `source` shaped like `target`, or an undefined
// tensor when no adaptation rule applies.
torch::Tensor adapt(const std::string& name, const torch::Tensor& source, const torch::Tensor& target) {
  if (name.ends_with("pos_embed") && source.dim() == 4 && target.dim() == 4 &&
      source.size(3) == target.size(3)) {
    return F::interpolate(source.to(target.dtype()).permute({0, 3, 1, 2}),
                          F::InterpolateFuncOptions()
                              .size(std::vector<int64_t>{target.size(1), target.size(2)})
                              .mode(torch::kBilinear)
                              .align_corners(false))
        .permute({0, 2, 3, 1});
  }
  if ((name.ends_with("rel_pos_h") || name.ends_with("rel_pos_w")) && source.dim() == 2 &&
      target.dim() == 2 && source.size(1) == target.size(1)) {
    return F::interpolate(source.to(target.dtype()).t().unsqueeze(0),
                          F::InterpolateFuncOptions()
                              .size(std::vector<int64_t>{target.size(0)})
                              .mode(torch::kLinear)
                              .align_corners(false))
        .squeeze(0)
        .t();
  }
  if (name == "mask_decoder.mask_tokens.weight" && source.dim() == 2 && target.dim() == 2 &&
      source.size(1) == target.size(1) && source.size(0) >= target.size(0)) {
    return source.narrow(0, 0, target.size(0));
  }
  return {};
}

}  // namespace

PretrainedReport load_pretrained(const std::filesystem::path& path, USamImpl& model) {
  auto archive = read_archive(path);
  PretrainedReport report;
  std::vector<std::string> problems;
  std::vector<std::pair<torch::Tensor, torch::Tensor>> copies;

  auto state = model_state(model);
  for (auto& [name, target] : state) {
    if (!expected_from_pretrained(name)) {
      report.fresh.push_back(name);
      continue;
    }
    auto it = archive.tensors.find(name);
    if (it == archive.tensors.end()) {
      problems.push_back("missing " + name);
      continue;
    }
    const auto& source = it->second;
    if (source.sizes() == target.sizes()) {
      copies.emplace_back(target, source);
      report.loaded.push_back(name);
    } else if (auto adapted = adapt(name, source, target); adapted.defined()) {
      copies.emplace_back(target, adapted);
      report.adapted.push_back(name);
    } else {
      std::ostringstream os;
      os << "mis-shaped " << name << ": checkpoint " << source.sizes() << ", model "
         << target.sizes();
      problems.push_back(os.str());
    }
  }
  for (const auto& [name, _] : archive.tensors) {
    if (!state.count(name)) report.unused.push_back(name);
  }
  if (!problems.empty()) {
    std::string msg = path.string() + " is incompatible with this model:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw IncompatibleCheckpoint(msg);
  }
  torch::NoGradGuard no_grad;
  for (auto& [target, source] : copies) target.copy_(source);
  return report;
}

}  // namespace usam
