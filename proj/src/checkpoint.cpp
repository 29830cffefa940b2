#include "aspectrec/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace aspectrec {

static_assert(std::endian::native == std::endian::little,
              "checkpoint io assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'A', 'R', 'C', 'K', 'P', 'T', '1', '\0'};

class Writer {
 public:
  void raw(const void* p, std::size_t n) {
    const char* c = static_cast<const char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  void u32(std::uint32_t v) { raw(&v, sizeof v); }
  void u64(std::uint64_t v) { raw(&v, sizeof v); }
  void f64(double v) { raw(&v, sizeof v); }
  void str(const std::string& s) {
    u64(s.size());
    raw(s.data(), s.size());
  }
  void str_list(const std::vector<std::string>& v) {
    u64(v.size());
    for (const std::string& s : v) str(s);
  }
  const std::vector<char>& bytes() const { return buf_; }

 private:
  std::vector<char> buf_;
};

class Reader {
 public:
  Reader(const char* data, std::size_t size) : data_(data), size_(size) {}

  void raw(void* p, std::size_t n) {
    if (at_ + n > size_) throw CheckpointError("checkpoint truncated");
    std::memcpy(p, data_ + at_, n);
    at_ += n;
  }
  std::uint32_t u32() {
    std::uint32_t v;
    raw(&v, sizeof v);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v;
    raw(&v, sizeof v);
    return v;
  }
  double f64() {
    double v;
    raw(&v, sizeof v);
    return v;
  }
  std::string str() {
    const std::uint64_t n = u64();
    if (n > size_ - at_) throw CheckpointError("checkpoint truncated");
    std::string s(data_ + at_, n);
    at_ += n;
    return s;
  }
  std::vector<std::string> str_list() {
    const std::uint64_t n = u64();
    std::vector<std::string> out;
    out.reserve(n);
    for (std::uint64_t i = 0; i < n; ++i) out.push_back(str());
    return out;
  }
  std::size_t at() const { return at_; }

 private:
  const char* data_;
  std::size_t size_;
  std::size_t at_ = 0;
};

std::uint64_t fnv1a_bytes(const char* p, std::size_t n) {
  std::uint64_t h = 14695981039346656037ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(p[i]);
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace

void save_checkpoint(const Checkpoint& c, const std::string& path) {
  Writer w;
  w.raw(kMagic, sizeof kMagic);
  w.u32(c.version);
  w.str(c.config_text);
  w.str_list(c.vocab_tokens);
  w.str_list(c.aspect_terms);
  w.str_list(c.user_ids);
  w.str_list(c.item_ids);
  w.u64(c.blocks.size());
  for (const CheckpointBlock& b : c.blocks) {
    w.str(b.name);
    w.u32(static_cast<std::uint32_t>(b.shape.size()));
    for (const std::size_t d : b.shape) w.u64(d);
    w.u64(b.values.size());
    for (const double v : b.values) w.f64(v);
  }
  const std::uint64_t checksum =
      fnv1a_bytes(w.bytes().data(), w.bytes().size());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot write checkpoint: " + path);
  out.write(w.bytes().data(), static_cast<std::streamsize>(w.bytes().size()));
  out.write(reinterpret_cast<const char*>(&checksum), sizeof checksum);
  if (!out) throw CheckpointError("checkpoint write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint: " + path);
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                          std::istreambuf_iterator<char>());
  if (bytes.size() < sizeof(kMagic) + sizeof(std::uint64_t))
    throw CheckpointError("checkpoint too small: " + path);
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + bytes.size() - sizeof stored,
              sizeof stored);
  const std::size_t body = bytes.size() - sizeof stored;
  if (fnv1a_bytes(bytes.data(), body) != stored)
    throw CheckpointError("checkpoint checksum mismatch: " + path);

  Reader r(bytes.data(), body);
  char magic[8];
  r.raw(magic, sizeof magic);
  if (std::memcmp(magic, kMagic, sizeof kMagic) != 0)
    throw CheckpointError("not a checkpoint file: " + path);
  Checkpoint c;
  c.version = r.u32();
  if (c.version != 1)
    throw CheckpointError("unsupported checkpoint version " +
                          std::to_string(c.version));
  c.config_text = r.str();
  c.vocab_tokens = r.str_list();
  c.aspect_terms = r.str_list();
  c.user_ids = r.str_list();
  c.item_ids = r.str_list();
  const std::uint64_t n_blocks = r.u64();
  for (std::uint64_t i = 0; i < n_blocks; ++i) {
    CheckpointBlock b;
    b.name = r.str();
    const std::uint32_t rank = r.u32();
    for (std::uint32_t k = 0; k < rank; ++k) b.shape.push_back(r.u64());
    const std::uint64_t count = r.u64();
    std::size_t expect = 1;
    for (const std::size_t d : b.shape) expect *= d;
    if (count != expect)
      throw CheckpointError("block '" + b.name + "' count/shape mismatch");
    b.values.reserve(count);
    for (std::uint64_t k = 0; k < count; ++k) b.values.push_back(r.f64());
    c.blocks.push_back(std::move(b));
  }
  if (r.at() != body)
    throw CheckpointError("trailing bytes in checkpoint: " + path);
  return c;
}

}  // namespace aspectrec
