#include "epift/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cstring>
#include <fstream>
#include <sstream>

namespace epift {

namespace {

constexpr const char* kMagic = "epift-checkpoint 1";

std::size_t width_of(DType d) { return d == DType::f32 ? 4 : 8; }

DType parse_dtype(const std::string& s, std::size_t offset) {
  if (s == "f32") return DType::f32;
  if (s == "f64") return DType::f64;
  throw ParseError("unknown dtype '" + s + "'", offset);
}

std::string shape_text(const Shape& s) {
  if (s.empty()) return "scalar";
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += 'x';
    out += std::to_string(s[i]);
  }
  return out;
}

Shape parse_shape(const std::string& s, std::size_t offset) {
  if (s == "scalar") return {};
  Shape out;
  std::stringstream in(s);
  std::string part;
  while (std::getline(in, part, 'x')) {
    std::size_t used = 0;
    long long v = 0;
    try {
      v = std::stoll(part, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != part.size() || part.empty() || v <= 0) throw ParseError("bad shape '" + s + "'", offset);
    out.push_back(v);
  }
  if (out.empty()) throw ParseError("bad shape '" + s + "'", offset);
  return out;
}

template <typename T>
void put_le(std::string& out, T v) {
  unsigned char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
  out.append(reinterpret_cast<const char*>(b), sizeof(T));
}

template <typename T>
T get_le(const char* p) {
  unsigned char b[sizeof(T)];
  std::memcpy(b, p, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
  T v;
  std::memcpy(&v, b, sizeof(T));
  return v;
}

bool valid_token(const std::string& s) {
  if (s.empty() || s[0] == '@' || s == "end") return false;
  for (char c : s)
    if (std::isspace(static_cast<unsigned char>(c))) return false;
  return true;
}

}  // namespace

const char* to_string(DType d) { return d == DType::f32 ? "f32" : "f64"; }

void Checkpoint::set_meta(const std::string& key, const std::string& value) {
  if (!valid_token("k" + key) || key.empty()) throw ConfigError("invalid metadata key '" + key + "'");
  if (value.find('\n') != std::string::npos) throw ConfigError("metadata value for " + key + " contains a newline");
  for (auto& kv : meta_)
    if (kv.first == key) {
      kv.second = value;
      return;
    }
  meta_.emplace_back(key, value);
}

bool Checkpoint::has_meta(const std::string& key) const {
  for (const auto& kv : meta_)
    if (kv.first == key) return true;
  return false;
}

const std::string& Checkpoint::meta(const std::string& key) const {
  for (const auto& kv : meta_)
    if (kv.first == key) return kv.second;
  throw ConfigError("checkpoint has no metadata key '" + key + "'");
}

template <typename Scalar>
void Checkpoint::add(const std::string& name, const Tensor<Scalar>& t) {
  if (!valid_token(name)) throw ConfigError("invalid tensor name '" + name + "'");
  if (contains(name)) throw ConfigError("duplicate tensor name '" + name + "'");
  entries_.push_back({name, std::is_same_v<Scalar, float> ? DType::f32 : DType::f64, t.template cast<double>()});
}

bool Checkpoint::contains(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return true;
  return false;
}

const Checkpoint::Entry& Checkpoint::entry(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return e;
  throw ConfigError("checkpoint has no tensor '" + name + "'");
}

template <typename Scalar>
Tensor<Scalar> Checkpoint::get(const std::string& name) const {
  return entry(name).values.template cast<Scalar>();
}

std::string Checkpoint::serialize() const {
  std::string head = std::string(kMagic) + "\n";
  for (const auto& [k, v] : meta_) head += "@" + k + " " + v + "\n";
  std::size_t offset = 0;
  for (const auto& e : entries_) {
    head += e.name + " " + shape_text(e.values.shape()) + " " + to_string(e.dtype) + " " + std::to_string(offset) + "\n";
    offset += width_of(e.dtype) * static_cast<std::size_t>(e.values.size());
  }
  head += "end\n";
  std::string body;
  body.reserve(offset);
  for (const auto& e : entries_)
    for (Index i = 0; i < e.values.size(); ++i) {
      if (e.dtype == DType::f32)
        put_le(body, static_cast<float>(e.values[i]));
      else
        put_le(body, e.values[i]);
    }
  return head + body;
}

Checkpoint Checkpoint::parse(const std::string& bytes) {
  Checkpoint ck;
  std::size_t pos = 0;
  auto next_line = [&](std::string& line) {
    const std::size_t nl = bytes.find('\n', pos);
    if (nl == std::string::npos) throw ParseError("unterminated manifest", pos);
    line = bytes.substr(pos, nl - pos);
    const std::size_t start = pos;
    pos = nl + 1;
    return start;
  };
  std::string line;
  next_line(line);
  if (line != kMagic) throw ParseError("not a checkpoint (bad magic)", 0);

  struct Pending {
    std::string name;
    Shape shape;
    DType dtype;
    std::size_t offset;
    std::size_t line_at;
  };
  std::vector<Pending> pending;
  for (;;) {
    const std::size_t at = next_line(line);
    if (line == "end") break;
    if (!line.empty() && line[0] == '@') {
      const std::size_t sp = line.find(' ');
      if (sp == std::string::npos) throw ParseError("metadata line without value", at);
      ck.meta_.emplace_back(line.substr(1, sp - 1), line.substr(sp + 1));
      continue;
    }
    std::istringstream in(line);
    std::string name, shape, dtype, extra;
    std::size_t offset = 0;
    if (!(in >> name >> shape >> dtype >> offset) || (in >> extra))
      throw ParseError("malformed manifest line '" + line + "'", at);
    pending.push_back({name, parse_shape(shape, at), parse_dtype(dtype, at), offset, at});
  }
  const std::size_t base = pos;
  std::size_t expected = 0;
  for (const auto& p : pending) {
    if (p.offset != expected) throw ParseError("tensor " + p.name + " has out-of-order byte offset", p.line_at);
    const std::size_t n = static_cast<std::size_t>(numel(p.shape));
    const std::size_t w = width_of(p.dtype);
    if (base + p.offset + n * w > bytes.size()) throw ParseError("tensor " + p.name + " is truncated", bytes.size());
    Tensor<double> t(p.shape);
    const char* src = bytes.data() + base + p.offset;
    for (std::size_t i = 0; i < n; ++i)
      t[static_cast<Index>(i)] =
          p.dtype == DType::f32 ? static_cast<double>(get_le<float>(src + 4 * i)) : get_le<double>(src + 8 * i);
    if (ck.contains(p.name)) throw ParseError("duplicate tensor name " + p.name, p.line_at);
    ck.entries_.push_back({p.name, p.dtype, std::move(t)});
    expected += n * w;
  }
  if (base + expected != bytes.size()) throw ParseError("trailing bytes after last tensor", base + expected);
  return ck;
}

void Checkpoint::save(const std::filesystem::path& path) const {
  const std::string bytes = serialize();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse(buf.str());
}

template <typename Scalar>
void store_params(Checkpoint& ckpt, const ParamSet<Scalar>& params, const std::string& prefix) {
  for (const auto& e : params.entries()) ckpt.add(prefix + e.name, e.var.value());
}

template <typename Scalar>
void restore_params(const Checkpoint& ckpt, ParamSet<Scalar>& params, const std::string& prefix) {
  for (auto& e : params.entries()) {
    const auto& src = ckpt.entry(prefix + e.name);
    if (src.values.shape() != e.var.shape())
      throw ConfigError("checkpoint tensor " + prefix + e.name + " has shape " + shape_str(src.values.shape()) +
                        ", model expects " + shape_str(e.var.shape()));
    e.var = Var<Scalar>::param(src.values.template cast<Scalar>());
  }
}

template void Checkpoint::add<float>(const std::string&, const Tensor<float>&);
template void Checkpoint::add<double>(const std::string&, const Tensor<double>&);
template Tensor<float> Checkpoint::get<float>(const std::string&) const;
template Tensor<double> Checkpoint::get<double>(const std::string&) const;
template void store_params<float>(Checkpoint&, const ParamSet<float>&, const std::string&);
template void store_params<double>(Checkpoint&, const ParamSet<double>&, const std::string&);
template void restore_params<float>(const Checkpoint&, ParamSet<float>&, const std::string&);
template void restore_params<double>(const Checkpoint&, ParamSet<double>&, const std::string&);

}  // namespace epift
