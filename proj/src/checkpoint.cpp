#include "uasr/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <vector>

namespace uasr {

namespace {

constexpr char kMagic[5] = {'U', 'A', 'S', 'R', '1'};

void put_u32(std::vector<uint8_t>& buf, uint32_t v) {
  buf.push_back(static_cast<uint8_t>(v & 0xff));
  buf.push_back(static_cast<uint8_t>((v >> 8) & 0xff));
  buf.push_back(static_cast<uint8_t>((v >> 16) & 0xff));
  buf.push_back(static_cast<uint8_t>((v >> 24) & 0xff));
}

void put_f32(std::vector<uint8_t>& buf, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(buf, bits);
}

class Reader {
 public:
  Reader(const std::vector<uint8_t>& buf, const std::string& path)
      : buf_(buf), path_(path) {}

  std::size_t offset() const { return off_; }

  void need(std::size_t n, const char* field) {
    if (off_ + n > buf_.size())
      throw IoError(path_ + ": truncated while reading " + field +
                    " at byte offset " + std::to_string(off_) + " (need " +
                    std::to_string(n) + " bytes, have " +
                    std::to_string(buf_.size() - off_) + ")");
  }

  uint32_t u32(const char* field) {
    need(4, field);
    uint32_t v = static_cast<uint32_t>(buf_[off_]) |
                 (static_cast<uint32_t>(buf_[off_ + 1]) << 8) |
                 (static_cast<uint32_t>(buf_[off_ + 2]) << 16) |
                 (static_cast<uint32_t>(buf_[off_ + 3]) << 24);
    off_ += 4;
    return v;
  }

  float f32(const char* field) {
    uint32_t bits = u32(field);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }

  std::string bytes(std::size_t n, const char* field) {
    need(n, field);
    std::string s(reinterpret_cast<const char*>(&buf_[off_]), n);
    off_ += n;
    return s;
  }

 private:
  const std::vector<uint8_t>& buf_;
  std::string path_;
  std::size_t off_ = 0;
};

std::vector<uint8_t> read_all(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open file: " + path);
  std::vector<uint8_t> buf((std::istreambuf_iterator<char>(in)),
                           std::istreambuf_iterator<char>());
  return buf;
}

void write_all(const std::string& path, const std::vector<uint8_t>& buf) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write file: " + path);
  out.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("short write to " + path);
}

}  // namespace

uint32_t crc32_ieee(const uint8_t* data, std::size_t len) {
  static uint32_t table[256];
  static bool ready = false;
  if (!ready) {
    for (uint32_t i = 0; i < 256; ++i) {
      uint32_t c = i;
      for (int k = 0; k < 8; ++k)
        c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      table[i] = c;
    }
    ready = true;
  }
  uint32_t crc = 0xFFFFFFFFu;
  for (std::size_t i = 0; i < len; ++i)
    crc = table[(crc ^ data[i]) & 0xFFu] ^ (crc >> 8);
  return crc ^ 0xFFFFFFFFu;
}

void checkpoint_save(const ParamStore& params, const ModelConfig& config,
                     const std::string& path) {
  std::vector<uint8_t> buf;
  buf.insert(buf.end(), kMagic, kMagic + 5);
  std::string cfg = kv_serialize(config.to_kv());
  put_u32(buf, static_cast<uint32_t>(cfg.size()));
  buf.insert(buf.end(), cfg.begin(), cfg.end());
  put_u32(buf, static_cast<uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    put_u32(buf, static_cast<uint32_t>(name.size()));
    buf.insert(buf.end(), name.begin(), name.end());
    put_u32(buf, static_cast<uint32_t>(t.shape().size()));
    for (int64_t e : t.shape()) put_u32(buf, static_cast<uint32_t>(e));
    for (double v : t.data()) put_f32(buf, static_cast<float>(v));
  }
  put_u32(buf, crc32_ieee(buf.data(), buf.size()));
  write_all(path, buf);
}

std::pair<ParamStore, ModelConfig> checkpoint_load(const std::string& path) {
  std::vector<uint8_t> buf = read_all(path);
  if (buf.size() < 5 || std::memcmp(buf.data(), kMagic, 5) != 0)
    throw IoError(path + ": bad magic at byte offset 0 (expected \"UASR1\")");
  if (buf.size() < 9)
    throw IoError(path + ": truncated before checksum (file is " +
                  std::to_string(buf.size()) + " bytes)");
  uint32_t stored_crc = static_cast<uint32_t>(buf[buf.size() - 4]) |
                        (static_cast<uint32_t>(buf[buf.size() - 3]) << 8) |
                        (static_cast<uint32_t>(buf[buf.size() - 2]) << 16) |
                        (static_cast<uint32_t>(buf[buf.size() - 1]) << 24);
  uint32_t actual_crc = crc32_ieee(buf.data(), buf.size() - 4);
  if (stored_crc != actual_crc)
    throw IoError(path + ": checksum mismatch at byte offset " +
                  std::to_string(buf.size() - 4) + " (stored " +
                  std::to_string(stored_crc) + ", computed " +
                  std::to_string(actual_crc) + ")");

  Reader r(buf, path);
  r.bytes(5, "magic");
  uint32_t cfg_len = r.u32("config length");
  std::string cfg_text = r.bytes(cfg_len, "config block");
  ModelConfig config = ModelConfig::from_kv(kv_parse(cfg_text));

  auto inventory = param_inventory(config);
  uint32_t n_tensors = r.u32("tensor count");
  if (n_tensors != inventory.size())
    throw IoError(path + ": tensor count " + std::to_string(n_tensors) +
                  " does not match the " + std::to_string(inventory.size()) +
                  " tensors implied by the config");
  ParamStore store;
  for (uint32_t i = 0; i < n_tensors; ++i) {
    uint32_t name_len = r.u32("tensor name length");
    std::string name = r.bytes(name_len, "tensor name");
    uint32_t rank = r.u32("tensor rank");
    Shape shape;
    for (uint32_t k = 0; k < rank; ++k)
      shape.push_back(static_cast<int64_t>(r.u32("tensor extent")));
    int64_t n = shape_numel(shape);
    std::vector<double> data(static_cast<std::size_t>(n));
    for (int64_t k = 0; k < n; ++k)
      data[static_cast<std::size_t>(k)] =
          static_cast<double>(r.f32("tensor values"));
    store.add(name, Tensor::from_data(shape, std::move(data), true));
  }
  // shape inventory must match the config exactly
  for (const ParamSpec& spec : inventory) {
    if (!store.has(spec.name))
      throw IoError(path + ": tensor '" + spec.name +
                    "' required by the config is missing");
    if (!same_shape(store.at(spec.name).shape(), spec.shape))
      throw IoError(path + ": tensor '" + spec.name + "' has shape " +
                    shape_str(store.at(spec.name).shape()) +
                    ", config implies " + shape_str(spec.shape));
  }
  return {std::move(store), config};
}

void write_features(const std::string& path, const Tensor& features) {
  std::vector<uint8_t> buf;
  put_u32(buf, static_cast<uint32_t>(features.rows()));
  put_u32(buf, static_cast<uint32_t>(features.cols()));
  for (double v : features.data()) put_f32(buf, static_cast<float>(v));
  write_all(path, buf);
}

Tensor read_features(const std::string& path) {
  std::vector<uint8_t> buf = read_all(path);
  Reader r(buf, path);
  uint32_t T = r.u32("frame count");
  uint32_t d = r.u32("feature width");
  if (T == 0 || d == 0)
    throw IoError(path + ": empty feature matrix (" + std::to_string(T) +
                  "x" + std::to_string(d) + ")");
  std::vector<double> data(static_cast<std::size_t>(T) * d);
  for (std::size_t i = 0; i < data.size(); ++i)
    data[i] = static_cast<double>(r.f32("feature values"));
  if (r.offset() != buf.size())
    throw IoError(path + ": trailing bytes after feature matrix at offset " +
                  std::to_string(r.offset()));
  return Tensor::from_data({static_cast<int64_t>(T), static_cast<int64_t>(d)},
                           std::move(data));
}

}  // namespace uasr
