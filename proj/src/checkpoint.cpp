#include "merit/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include "merit/errors.hpp"

namespace merit {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[] = "MERITCKPT";
constexpr std::size_t kMagicLen = sizeof(kMagic) - 1;

class Writer {
public:
  template <typename V> void put(V v) {
    char buf[sizeof(V)];
    std::memcpy(buf, &v, sizeof(V));
    out_.append(buf, sizeof(V));
  }
  void bytes(const void *p, std::size_t n) {
    out_.append(static_cast<const char *>(p), n);
  }
  std::string take() { return std::move(out_); }

private:
  std::string out_;
};

class Reader {
public:
  explicit Reader(const std::string &in) : in_(in) {}

  template <typename V> V get() {
    V v;
    std::memcpy(&v, need(sizeof(V)), sizeof(V));
    return v;
  }
  void bytes(void *dst, std::size_t n) { std::memcpy(dst, need(n), n); }
  bool done() const { return pos_ == in_.size(); }

private:
  const char *need(std::size_t n) {
    if (in_.size() - pos_ < n) {
      throw FormatError("checkpoint truncated at byte " + std::to_string(pos_));
    }
    const char *p = in_.data() + pos_;
    pos_ += n;
    return p;
  }

  const std::string &in_;
  std::size_t pos_ = 0;
};

template <typename T> void put_data(Writer &w, const Tensor<T> &t) {
  w.bytes(t.data(), t.numel() * sizeof(T));
}

template <typename T> void get_data(Reader &r, Tensor<T> &t) {
  r.bytes(t.data(), t.numel() * sizeof(T));
  if (!t.all_finite()) {
    throw FormatError("checkpoint contains non-finite values");
  }
}

struct Header {
  ModelConfig config;
  std::int64_t step = 0;
  OptimizerKind optimizer = OptimizerKind::merit;
  unsigned width = 0;
};

Header read_header(Reader &r) {
  char magic[kMagicLen];
  r.bytes(magic, kMagicLen);
  if (std::memcmp(magic, kMagic, kMagicLen) != 0) {
    throw FormatError("not a checkpoint (bad magic bytes)");
  }
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " +
                      std::to_string(version));
  }
  Header h;
  h.config.n_layer = r.get<std::uint64_t>();
  h.config.n_head = r.get<std::uint64_t>();
  h.config.d_model = r.get<std::uint64_t>();
  h.config.context_len = r.get<std::uint64_t>();
  h.config.vocab_size = r.get<std::uint64_t>();
  const auto qk = r.get<std::uint8_t>();
  if (qk > 1) {
    throw FormatError("invalid qk_norm flag in checkpoint");
  }
  h.config.qk_norm = qk == 1;
  try {
    h.config.validate();
  } catch (const ConfigError &e) {
    throw FormatError(std::string("invalid model config in checkpoint: ") +
                      e.what());
  }
  h.step = r.get<std::int64_t>();
  const auto kind = r.get<std::uint8_t>();
  if (kind > static_cast<std::uint8_t>(OptimizerKind::merit)) {
    throw FormatError("invalid optimizer kind in checkpoint");
  }
  h.optimizer = static_cast<OptimizerKind>(kind);
  h.width = r.get<std::uint8_t>();
  if (h.width != 4 && h.width != 8) {
    throw FormatError("invalid element width " + std::to_string(h.width));
  }
  return h;
}

} // namespace

template <typename T> std::string serialize_checkpoint(const Checkpoint<T> &c) {
  Writer w;
  w.bytes(kMagic, kMagicLen);
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint64_t>(c.config.n_layer);
  w.put<std::uint64_t>(c.config.n_head);
  w.put<std::uint64_t>(c.config.d_model);
  w.put<std::uint64_t>(c.config.context_len);
  w.put<std::uint64_t>(c.config.vocab_size);
  w.put<std::uint8_t>(c.config.qk_norm ? 1 : 0);
  w.put<std::int64_t>(c.step);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(c.optimizer));
  w.put<std::uint8_t>(sizeof(T));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(c.params.size()));
  for (std::size_t i = 0; i < c.params.size(); ++i) {
    const std::string &name = c.params.name(i);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
    w.bytes(name.data(), name.size());
    const Tensor<T> &t = c.params[i];
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) {
      w.put<std::uint64_t>(d);
    }
    put_data(w, t);
  }
  w.put<std::int64_t>(c.state.step);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(c.state.moments.size()));
  for (const auto &mo : c.state.moments) {
    put_data(w, mo.m);
    put_data(w, mo.v);
  }
  return w.take();
}

template <typename T> Checkpoint<T> parse_checkpoint(const std::string &bytes) {
  Reader r(bytes);
  const Header h = read_header(r);
  if (h.width != sizeof(T)) {
    throw FormatError("checkpoint stores " + std::to_string(h.width) +
                      "-byte elements, expected " + std::to_string(sizeof(T)));
  }
  Checkpoint<T> c;
  c.config = h.config;
  c.step = h.step;
  c.optimizer = h.optimizer;
  const auto count = r.get<std::uint32_t>();
  const auto expected = parameter_names(c.config);
  if (count != expected.size()) {
    throw FormatError("checkpoint has " + std::to_string(count) +
                      " tensors, config implies " +
                      std::to_string(expected.size()));
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name(r.get<std::uint32_t>(), '\0');
    if (name.size() > 4096) {
      throw FormatError("implausible tensor name length");
    }
    r.bytes(name.data(), name.size());
    if (name != expected[i]) {
      throw FormatError("unexpected tensor '" + name + "' at position " +
                        std::to_string(i));
    }
    Shape shape(r.get<std::uint32_t>());
    if (shape.empty() || shape.size() > 2) {
      throw FormatError("tensor '" + name + "' has invalid rank");
    }
    for (std::size_t &d : shape) {
      d = r.get<std::uint64_t>();
      if (d == 0 || d > (1u << 30)) {
        throw FormatError("tensor '" + name + "' has invalid shape");
      }
    }
    std::size_t numel = 1;
    for (std::size_t d : shape) {
      numel *= d;
    }
    if (numel > bytes.size() / sizeof(T)) {
      throw FormatError("tensor '" + name + "' is larger than the file");
    }
    Tensor<T> t(shape);
    get_data(r, t);
    c.params.add(std::move(name), std::move(t));
  }
  c.state.step = r.get<std::int64_t>();
  const auto moments = r.get<std::uint32_t>();
  if (moments != 0 && moments != count) {
    throw FormatError("optimizer state does not match parameters");
  }
  for (std::uint32_t i = 0; i < moments; ++i) {
    auto mo = Moments<T>::zeros(c.params[i].shape());
    get_data(r, mo.m);
    get_data(r, mo.v);
    c.state.moments.push_back(std::move(mo));
  }
  if (!r.done()) {
    throw FormatError("trailing bytes after checkpoint payload");
  }
  return c;
}

std::string read_file(const std::filesystem::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw IoError("cannot read '" + path.string() + "'");
  }
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

template <typename T>
void save_checkpoint(const Checkpoint<T> &c, const std::filesystem::path &path) {
  const std::string bytes = serialize_checkpoint(c);
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) {
      throw IoError("cannot write checkpoint '" + tmp.string() + "'");
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
      throw IoError("error while writing '" + tmp.string() + "'");
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    throw IoError("cannot move checkpoint to '" + path.string() +
                  "': " + ec.message());
  }
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path &path) {
  const std::string bytes = read_file(path);
  try {
    return parse_checkpoint<T>(bytes);
  } catch (const FormatError &e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

unsigned checkpoint_element_width(const std::filesystem::path &path) {
  const std::string bytes = read_file(path);
  Reader r(bytes);
  try {
    return read_header(r).width;
  } catch (const FormatError &e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

Checkpoint<double> load_checkpoint_f64(const std::filesystem::path &path) {
  if (checkpoint_element_width(path) == 8) {
    return load_checkpoint<double>(path);
  }
  const Checkpoint<float> f = load_checkpoint<float>(path);
  auto widen = [](const Tensor<float> &t) {
    Tensor<double> out(t.shape());
    for (std::size_t i = 0; i < t.numel(); ++i) {
      out[i] = t[i];
    }
    return out;
  };
  Checkpoint<double> d;
  d.config = f.config;
  d.step = f.step;
  d.optimizer = f.optimizer;
  for (std::size_t i = 0; i < f.params.size(); ++i) {
    d.params.add(f.params.name(i), widen(f.params[i]));
  }
  d.state.step = f.state.step;
  for (const auto &mo : f.state.moments) {
    d.state.moments.push_back({widen(mo.m), widen(mo.v)});
  }
  return d;
}

#define MERIT_INSTANTIATE_CKPT(T)                                              \
  template std::string serialize_checkpoint<T>(const Checkpoint<T> &);         \
  template Checkpoint<T> parse_checkpoint<T>(const std::string &);             \
  template void save_checkpoint<T>(const Checkpoint<T> &,                      \
                                   const std::filesystem::path &);             \
  template Checkpoint<T> load_checkpoint<T>(const std::filesystem::path &);

MERIT_INSTANTIATE_CKPT(float)
MERIT_INSTANTIATE_CKPT(double)

#undef MERIT_INSTANTIATE_CKPT

} // namespace merit
