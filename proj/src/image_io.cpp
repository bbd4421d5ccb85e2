#include "usam/image_io.hpp"

#include <png.h>

#include <csetjmp>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "usam/error.hpp"

namespace usam {

namespace {

struct ReadCursor {
  std::span<const uint8_t> bytes;
  size_t offset = 0;
};

void read_from_span(png_structp png, png_bytep out, png_size_t length) {
  auto* cursor = static_cast<ReadCursor*>(png_get_io_ptr(png));
  if (cursor->offset + length > cursor->bytes.size()) {
    png_error(png, "truncated PNG stream");
  }
  std::memcpy(out, cursor->bytes.data() + cursor->offset, length);
  cursor->offset += length;
}

void write_to_vector(png_structp png, png_bytep data, png_size_t length) {
  auto* out = static_cast<std::vector<uint8_t>*>(png_get_io_ptr(png));
  out->insert(out->end(), data, data + length);
}

void flush_noop(png_structp) {}

}  // namespace

GrayImage decode_png(std::span<const uint8_t> bytes) {
  if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0) {
    throw IoError("not a PNG stream");
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  // Everything with a destructor lives above the setjmp so a libpng error
  // longjmp never skips one.
  ReadCursor cursor{bytes, 0};
  GrayImage image;
  std::vector<uint8_t> raw;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("corrupt PNG stream");
  }
  png_set_read_fn(png, &cursor, read_from_span);
  png_read_info(png, info);

  const int color_type = png_get_color_type(png, info);
  if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color_type == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) {
    png_set_expand_gray_1_2_4_to_8(png);
  }
  if ((color_type & PNG_COLOR_MASK_ALPHA) || png_get_valid(png, info, PNG_INFO_tRNS)) {
    png_set_strip_alpha(png);
  }
  if ((color_type & PNG_COLOR_MASK_COLOR) || color_type == PNG_COLOR_TYPE_PALETTE) {
    png_set_rgb_to_gray_fixed(png, 1, -1, -1);
  }
  if (png_get_bit_depth(png, info) == 16) png_set_swap(png);
  png_read_update_info(png, info);

  image.height = png_get_image_height(png, info);
  image.width = png_get_image_width(png, info);
  image.bit_depth = png_get_bit_depth(png, info) == 16 ? 16 : 8;
  const size_t rowbytes = png_get_rowbytes(png, info);
  raw.resize(rowbytes * image.height);
  rows.resize(image.height);
  for (int64_t y = 0; y < image.height; ++y) rows[y] = raw.data() + y * rowbytes;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  image.pixels.resize(image.height * image.width);
  for (int64_t y = 0; y < image.height; ++y) {
    for (int64_t x = 0; x < image.width; ++x) {
      uint16_t v;
      if (image.bit_depth == 16) {
        std::memcpy(&v, rows[y] + 2 * x, 2);
      } else {
        v = rows[y][x];
      }
      image.pixels[y * image.width + x] = v;
    }
  }
  return image;
}

std::vector<uint8_t> encode_png(const GrayImage& image) {
  if (image.bit_depth != 8 && image.bit_depth != 16) throw IoError("bit depth must be 8 or 16");
  if (static_cast<int64_t>(image.pixels.size()) != image.height * image.width) {
    throw ShapeError("pixel buffer does not match image size");
  }
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  std::vector<uint8_t> out;
  const int64_t bytes_per_px = image.bit_depth / 8;
  std::vector<uint8_t> row(image.width * bytes_per_px);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("PNG encoding failed");
  }
  png_set_write_fn(png, &out, write_to_vector, flush_noop);
  png_set_IHDR(png, info, image.width, image.height, image.bit_depth, PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  if (image.bit_depth == 16) png_set_swap(png);
  for (int64_t y = 0; y < image.height; ++y) {
    for (int64_t x = 0; x < image.width; ++x) {
      const uint16_t v = image.pixels[y * image.width + x];
      if (bytes_per_px == 2) {
        std::memcpy(row.data() + 2 * x, &v, 2);
      } else {
        row[x] = static_cast<uint8_t>(v);
      }
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

std::vector<uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

GrayImage read_png(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  try {
    return decode_png(bytes);
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

void write_png(const std::filesystem::path& path, const GrayImage& image) {
  const auto bytes = encode_png(image);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

namespace {

std::string trim(std::string s) {
  const auto first = s.find_first_not_of(" \t\r");
  const auto last = s.find_last_not_of(" \t\r");
  if (first == std::string::npos) return "";
  return s.substr(first, last - first + 1);
}

torch::ScalarType met_type(const std::string& name) {
  static const std::map<std::string, torch::ScalarType> kTypes = {
      {"MET_UCHAR", torch::kUInt8}, {"MET_CHAR", torch::kInt8},     {"MET_SHORT", torch::kInt16},
      {"MET_INT", torch::kInt32},   {"MET_FLOAT", torch::kFloat32}, {"MET_DOUBLE", torch::kFloat64},
      {"MET_USHORT", torch::kUInt16}};
  auto it = kTypes.find(name);
  if (it == kTypes.end()) throw IoError("unsupported MetaImage element type " + name);
  return it->second;
}

}  // namespace

MetaImage read_mhd(const std::filesystem::path& header) {
  std::ifstream in(header);
  if (!in) throw IoError("cannot open " + header.string());
  std::map<std::string, std::string> fields;
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    fields[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    if (trim(line.substr(0, eq)) == "ElementDataFile") break;
  }
  auto need = [&](const std::string& key) -> const std::string& {
    auto it = fields.find(key);
    if (it == fields.end()) throw IoError(header.string() + ": missing " + key);
    return it->second;
  };

  std::istringstream dims_in(need("DimSize"));
  std::vector<int64_t> dims;
  for (int64_t d; dims_in >> d;) dims.push_back(d);
  if (dims.size() == 2) dims.push_back(1);
  if (dims.size() != 3) throw IoError(header.string() + ": expected 2-D or 3-D DimSize");
  if (fields.count("ElementNumberOfChannels") && fields["ElementNumberOfChannels"] != "1") {
    throw IoError(header.string() + ": multi-channel MetaImage not supported");
  }
  if (fields.count("ElementByteOrderMSB") &&
      (fields["ElementByteOrderMSB"] == "True" || fields["ElementByteOrderMSB"] == "true")) {
    throw IoError(header.string() + ": big-endian MetaImage not supported");
  }
  if (fields.count("CompressedData") && fields["CompressedData"] != "False") {
    throw IoError(header.string() + ": compressed MetaImage not supported");
  }

  MetaImage image;
  const auto spacing_key = fields.count("ElementSpacing") ? "ElementSpacing" : "ElementSize";
  if (fields.count(spacing_key)) {
    std::istringstream sp(fields[spacing_key]);
    for (size_t i = 0; i < 3 && (sp >> image.spacing[i]); ++i) {
    }
  }

  const auto type = met_type(need("ElementType"));
  const std::string data_file = need("ElementDataFile");
  const int64_t count = dims[0] * dims[1] * dims[2];
  const size_t nbytes = count * torch::elementSize(type);

  std::vector<uint8_t> raw;
  if (data_file == "LOCAL") {
    raw.resize(nbytes);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(nbytes));
    if (static_cast<size_t>(in.gcount()) != nbytes) throw IoError(header.string() + ": truncated data");
  } else {
    raw = read_file(header.parent_path() / data_file);
    if (raw.size() < nbytes) throw IoError(header.string() + ": raw file too short");
    raw.resize(nbytes);
  }
  image.data = torch::from_blob(raw.data(), {dims[2], dims[1], dims[0]}, type)
                   .to(torch::kFloat64)
                   .clone();
  return image;
}

void write_mhd(const std::filesystem::path& header, const torch::Tensor& data,
               std::array<double, 3> spacing, bool as_labels) {
  if (data.dim() != 3) throw ShapeError("MetaImage writer expects (z, y, x)");
  const auto type = as_labels ? torch::kUInt8 : torch::kInt16;
  auto raw = data.round().to(type).contiguous();
  auto raw_path = header;
  raw_path.replace_extension(".raw");
  {
    std::ofstream out(header);
    if (!out) throw IoError("cannot write " + header.string());
    out << "ObjectType = Image\nNDims = 3\n"
        << "DimSize = " << data.size(2) << " " << data.size(1) << " " << data.size(0) << "\n"
        << "ElementSpacing = " << spacing[0] << " " << spacing[1] << " " << spacing[2] << "\n"
        << "ElementByteOrderMSB = False\n"
        << "ElementType = " << (as_labels ? "MET_UCHAR" : "MET_SHORT") << "\n"
        << "ElementDataFile = " << raw_path.filename().string() << "\n";
  }
  std::ofstream out(raw_path, std::ios::binary);
  if (!out) throw IoError("cannot write " + raw_path.string());
  out.write(static_cast<const char*>(raw.data_ptr()),
            static_cast<std::streamsize>(raw.numel() * raw.element_size()));
}

}  // namespace usam
