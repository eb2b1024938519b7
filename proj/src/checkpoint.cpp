#include "ma3/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace ma3 {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'M', 'A', '3', 'C', 'K', 'P', 'T', '\0'};

class Writer {
 public:
  explicit Writer(std::ostream& os) : os_(os) {}
  template <typename T>
  void pod(T v) {
    os_.write(reinterpret_cast<const char*>(&v), sizeof v);
  }
  void str(const std::string& s) {
    pod<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    os_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  void meta(const MetaMap& m) {
    pod<std::uint32_t>(static_cast<std::uint32_t>(m.size()));
    for (const auto& [k, v] : m) {
      str(k);
      str(v);
    }
  }

 private:
  std::ostream& os_;
};

class Reader {
 public:
  Reader(std::istream& is, std::string path) : is_(is), path_(std::move(path)) {}
  template <typename T>
  T pod() {
    T v{};
    is_.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!is_) throw IoError("checkpoint: truncated file " + path_);
    return v;
  }
  std::string str() {
    const auto n = pod<std::uint32_t>();
    if (n > (1u << 24)) throw IoError("checkpoint: corrupt string length in " + path_);
    std::string s(n, '\0');
    is_.read(s.data(), n);
    if (!is_) throw IoError("checkpoint: truncated file " + path_);
    return s;
  }
  MetaMap meta() {
    MetaMap m;
    const auto n = pod<std::uint32_t>();
    for (std::uint32_t i = 0; i < n; ++i) {
      std::string k = str();
      m[k] = str();
    }
    return m;
  }

 private:
  std::istream& is_;
  std::string path_;
};

}  // namespace

const CheckpointTensor& CheckpointSection::tensor(const std::string& tname) const {
  for (const auto& t : tensors)
    if (t.name == tname) return t;
  throw IoError("checkpoint: section '" + name + "' has no tensor '" + tname + "'");
}

const std::string& CheckpointSection::get(const std::string& key) const {
  const auto it = meta.find(key);
  if (it == meta.end()) throw IoError("checkpoint: section '" + name + "' lacks '" + key + "'");
  return it->second;
}

bool Checkpoint::has_section(const std::string& name) const {
  for (const auto& s : sections)
    if (s.name == name) return true;
  return false;
}

const CheckpointSection& Checkpoint::section(const std::string& name) const {
  for (const auto& s : sections)
    if (s.name == name) return s;
  throw IoError("checkpoint: no section '" + name + "'");
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  if (ckpt.precision_bits != 32 && ckpt.precision_bits != 64)
    throw ContractError("save_checkpoint: precision must be 32 or 64 bits");
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("checkpoint: cannot write " + path.string());
  Writer w(os);
  os.write(kMagic, sizeof kMagic);
  w.pod<std::uint32_t>(kCheckpointVersion);
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(ckpt.precision_bits));
  w.meta(ckpt.meta);
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(ckpt.sections.size()));
  for (const auto& s : ckpt.sections) {
    w.str(s.name);
    w.meta(s.meta);
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(s.tensors.size()));
    for (const auto& t : s.tensors) {
      w.str(t.name);
      w.pod<std::uint64_t>(t.rows);
      w.pod<std::uint64_t>(t.cols);
      for (double v : t.values) {
        if (ckpt.precision_bits == 32)
          w.pod<float>(static_cast<float>(v));
        else
          w.pod<double>(v);
      }
    }
  }
  if (!os) throw IoError("checkpoint: write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("checkpoint: cannot open " + path.string());
  char magic[sizeof kMagic];
  is.read(magic, sizeof magic);
  if (!is || std::memcmp(magic, kMagic, sizeof kMagic) != 0)
    throw IoError("checkpoint: " + path.string() + " is not a checkpoint file");
  Reader r(is, path.string());
  const auto version = r.pod<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointVersionError("checkpoint: " + path.string() + " has format version " + std::to_string(version) +
                                 ", this build reads version " + std::to_string(kCheckpointVersion));
  }
  Checkpoint ckpt;
  ckpt.precision_bits = static_cast<int>(r.pod<std::uint32_t>());
  if (ckpt.precision_bits != 32 && ckpt.precision_bits != 64)
    throw IoError("checkpoint: bad precision flag in " + path.string());
  ckpt.meta = r.meta();
  const auto nsec = r.pod<std::uint32_t>();
  for (std::uint32_t i = 0; i < nsec; ++i) {
    CheckpointSection s;
    s.name = r.str();
    s.meta = r.meta();
    const auto nt = r.pod<std::uint32_t>();
    for (std::uint32_t k = 0; k < nt; ++k) {
      CheckpointTensor t;
      t.name = r.str();
      t.rows = r.pod<std::uint64_t>();
      t.cols = r.pod<std::uint64_t>();
      if (t.rows * t.cols > (std::uint64_t(1) << 32)) throw IoError("checkpoint: corrupt tensor size in " + path.string());
      t.values.resize(t.rows * t.cols);
      for (auto& v : t.values) v = ckpt.precision_bits == 32 ? double(r.pod<float>()) : r.pod<double>();
      s.tensors.push_back(std::move(t));
    }
    ckpt.sections.push_back(std::move(s));
  }
  return ckpt;
}

namespace detail {

MetaMap conv_stack_meta(const ConvStackArch& a) {
  return {{"in_channels", std::to_string(a.in_channels)},
          {"height", std::to_string(a.height)},
          {"width", std::to_string(a.width)},
          {"blocks", std::to_string(a.blocks)},
          {"filters", std::to_string(a.filters)},
          {"batch_norm", a.batch_norm ? "1" : "0"}};
}

ConvStackArch conv_stack_from_meta(const CheckpointSection& s) {
  ConvStackArch a;
  try {
    a.in_channels = std::stoi(s.get("in_channels"));
    a.height = std::stoi(s.get("height"));
    a.width = std::stoi(s.get("width"));
    a.blocks = std::stoi(s.get("blocks"));
    a.filters = std::stoi(s.get("filters"));
    a.batch_norm = s.get("batch_norm") == "1";
  } catch (const std::logic_error&) {
    throw IoError("checkpoint: malformed architecture in section '" + s.name + "'");
  }
  return a;
}

}  // namespace detail

}  // namespace ma3
