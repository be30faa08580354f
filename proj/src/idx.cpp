#include <cstdio>
#include <fstream>
#include <iterator>

#include "normlab/data.hpp"

namespace normlab {

namespace {

constexpr std::uint32_t kLabelMagic = 0x00000801;
constexpr std::uint32_t kImageMagic = 0x00000803;

std::uint32_t read_be32(const unsigned char* p) {
  return (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) | (std::uint32_t{p[2]} << 8) |
         std::uint32_t{p[3]};
}

void write_be32(std::string& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<char>((v >> s) & 0xff));
}

std::string hex(std::uint32_t v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "0x%08x", v);
  return buf;
}

}  // namespace

IdxArray read_idx(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("idx: cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 4)
    throw Error("idx: " + path.string() + " is " + std::to_string(bytes.size()) +
                " bytes, too short for the 4-byte magic");
  IdxArray a;
  a.magic = read_be32(p);
  if (a.magic != kImageMagic && a.magic != kLabelMagic)
    throw Error("idx: " + path.string() + " has magic " + hex(a.magic) + ", expected " +
                hex(kImageMagic) + " (images) or " + hex(kLabelMagic) + " (labels)");
  const std::size_t ndims = a.magic & 0xff;
  const std::size_t header = 4 + 4 * ndims;
  if (bytes.size() < header)
    throw Error("idx: " + path.string() + " truncated inside the header (magic " + hex(a.magic) +
                " declares " + std::to_string(ndims) + " dimensions)");
  std::size_t payload = 1;
  for (std::size_t i = 0; i < ndims; ++i) {
    a.dims.push_back(read_be32(p + 4 + 4 * i));
    payload *= a.dims.back();
  }
  if (bytes.size() - header != payload)
    throw Error("idx: " + path.string() + " payload is " + std::to_string(bytes.size() - header) +
                " bytes, header declares " + std::to_string(payload) +
                (bytes.size() - header < payload ? " (truncated)" : " (trailing data)"));
  a.values.assign(p + header, p + bytes.size());
  return a;
}

void write_idx(const std::filesystem::path& path, const IdxArray& a) {
  if ((a.magic & 0xff) != a.dims.size())
    throw Error("idx: magic " + hex(a.magic) + " does not match " + std::to_string(a.dims.size()) +
                " dimensions");
  std::string out;
  write_be32(out, a.magic);
  for (auto d : a.dims) write_be32(out, d);
  out.append(a.values.begin(), a.values.end());
  std::ofstream f(path, std::ios::binary);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw Error("idx: failed to write " + path.string());
}

IdxImages load_idx_images(const std::filesystem::path& path) {
  auto a = read_idx(path);
  if (a.magic != kImageMagic)
    throw Error("idx: " + path.string() + " has magic " + hex(a.magic) + ", expected image magic " +
                hex(kImageMagic));
  IdxImages img;
  img.count = a.dims[0];
  img.rows = a.dims[1];
  img.cols = a.dims[2];
  img.pixels.resize(a.values.size());
  for (std::size_t i = 0; i < a.values.size(); ++i) img.pixels[i] = a.values[i] / 255.0;
  return img;
}

std::vector<int> load_idx_labels(const std::filesystem::path& path) {
  auto a = read_idx(path);
  if (a.magic != kLabelMagic)
    throw Error("idx: " + path.string() + " has magic " + hex(a.magic) + ", expected label magic " +
                hex(kLabelMagic));
  std::vector<int> labels(a.values.begin(), a.values.end());
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] > 9)
      throw Error("idx: label out of range: entry " + std::to_string(i) + " is " +
                  std::to_string(labels[i]));
  return labels;
}

}  // namespace normlab
