#pragma once

// ModelBundle checkpoints.
//
//   "SFCK"  u16 version
//   then sections, each: 4-byte tag, u64 byte length, payload
//     CONF  canonical key=value text (model spec, dtype)
//     PARM  u32 count, then per tensor: u32 name length, name, TNSR blob
//     OPTM  f64 beta1, beta2, eps, u32 count, then per entry:
//           u32 name length, name, u64 step, TNSR m, TNSR v
//     META  u64 stage1_done, u64 stage2_done, u64 count, then per epoch:
//           u32 stage, u64 epoch, f64 train_loss, f64 val_loss
// All integers and floats little-endian. Loading builds a fresh bundle and
// only returns it once every section has been read and checked.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "studyformer/errors.hpp"
#include "studyformer/model.hpp"
#include "studyformer/tensor_io.hpp"

namespace studyformer {

inline constexpr char kCheckpointMagic[4] = {'S', 'F', 'C', 'K'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

namespace detail {

class ByteWriter {
 public:
  template <class U>
  void put(U v) {
    static_assert(std::is_integral_v<U>);
    for (std::size_t i = 0; i < sizeof(U); ++i) bytes_.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
  }
  void put_f64(double v) { put(std::bit_cast<std::uint64_t>(v)); }
  void put_raw(const std::string& s) { bytes_ += s; }
  void put_string(const std::string& s) {
    put(static_cast<std::uint32_t>(s.size()));
    bytes_ += s;
  }
  template <class T>
  void put_tensor(const Tensor<T>& t) {
    std::ostringstream os;
    write_tensor(os, t);
    const std::string blob = os.str();
    put(static_cast<std::uint64_t>(blob.size()));
    bytes_ += blob;
  }
  void put_section(const char (&tag)[5], const ByteWriter& body) {
    bytes_.append(tag, 4);
    put(static_cast<std::uint64_t>(body.bytes_.size()));
    bytes_ += body.bytes_;
  }
  const std::string& bytes() const { return bytes_; }

 private:
  std::string bytes_;
};

class ByteReader {
 public:
  ByteReader(const std::string& bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw FormatError(what_ + ": truncated");
  }
  template <class U>
  U get() {
    need(sizeof(U));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return static_cast<U>(v);
  }
  double get_f64() { return std::bit_cast<double>(get<std::uint64_t>()); }
  std::string get_raw(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::string get_string() { return get_raw(get<std::uint32_t>()); }
  template <class T>
  Tensor<T> get_tensor() {
    const auto n = static_cast<std::size_t>(get<std::uint64_t>());
    std::istringstream in(get_raw(n));
    return read_tensor<T>(in);
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::string& bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

inline std::string join_sizes(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

inline std::vector<std::size_t> parse_sizes(const std::string& text, const std::string& key) {
  std::vector<std::size_t> out;
  if (text.empty()) return out;
  for (const auto& part : split(text, ',')) {
    std::size_t used = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(part, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != part.size()) throw FormatError("checkpoint: bad integer list for " + key);
    out.push_back(static_cast<std::size_t>(v));
  }
  return out;
}

inline std::string hex_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%a", v);
  return buf;
}

}  // namespace detail

// Canonical key=value rendering of a model spec, one key per line, fixed order.
template <class T>
std::string canonical_config(const ModelSpec& spec) {
  std::ostringstream os;
  os << "dtype=" << dtype_name<T>() << '\n';
  os << "kind=" << model_kind_name(spec.kind) << '\n';
  os << "name=" << spec.name << '\n';
  os << "seed=" << spec.seed << '\n';
  os << "labels=" << spec.label_names.size() << '\n';
  for (std::size_t i = 0; i < spec.label_names.size(); ++i) os << "label." << i << '=' << spec.label_names[i] << '\n';
  os << "label_subset=" << detail::join_sizes(spec.label_subset) << '\n';
  const auto& b = spec.backbone;
  os << "backbone.input_size=" << b.input_size << '\n';
  os << "backbone.in_channels=" << b.in_channels << '\n';
  os << "backbone.stage_channels=" << detail::join_sizes(b.stage_channels) << '\n';
  os << "backbone.downsample=" << detail::join_sizes(b.downsample) << '\n';
  os << "backbone.out_channels=" << b.out_channels << '\n';
  os << "backbone.out_grid=" << b.out_grid << '\n';
  os << "backbone.kernel_size=" << b.kernel_size << '\n';
  const auto& v = spec.vit;
  os << "vit.depth=" << v.depth << '\n';
  os << "vit.heads=" << v.heads << '\n';
  os << "vit.mlp_dim=" << v.mlp_dim << '\n';
  os << "vit.embed_dim=" << v.embed_dim << '\n';
  os << "vit.supported_widths=" << detail::join_sizes(v.supported_widths) << '\n';
  os << "vit.ln_eps=" << detail::hex_double(v.ln_eps) << '\n';
  os << "mvcnn.hidden=" << spec.mvcnn_hidden << '\n';
  return os.str();
}

namespace detail {

template <class T>
ModelSpec parse_canonical_config(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("checkpoint: malformed config line '" + line + "'");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto get = [&](const std::string& key) -> const std::string& {
    const auto it = kv.find(key);
    if (it == kv.end()) throw FormatError("checkpoint: config lacks key " + key);
    return it->second;
  };
  auto get_size = [&](const std::string& key) {
    const auto v = parse_sizes(get(key), key);
    if (v.size() != 1) throw FormatError("checkpoint: bad integer for " + key);
    return v.front();
  };
  if (get("dtype") != dtype_name<T>()) {
    throw FormatError("checkpoint: stored dtype " + get("dtype") + ", requested " + dtype_name<T>());
  }
  ModelSpec spec;
  try {
    spec.kind = parse_model_kind(get("kind"));
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint: ") + e.what());
  }
  spec.name = get("name");
  spec.seed = get_size("seed");
  const std::size_t n_labels = get_size("labels");
  for (std::size_t i = 0; i < n_labels; ++i) spec.label_names.push_back(get("label." + std::to_string(i)));
  spec.label_subset = parse_sizes(get("label_subset"), "label_subset");
  auto& b = spec.backbone;
  b.input_size = get_size("backbone.input_size");
  b.in_channels = get_size("backbone.in_channels");
  b.stage_channels = parse_sizes(get("backbone.stage_channels"), "backbone.stage_channels");
  b.downsample = parse_sizes(get("backbone.downsample"), "backbone.downsample");
  b.out_channels = get_size("backbone.out_channels");
  b.out_grid = get_size("backbone.out_grid");
  b.kernel_size = get_size("backbone.kernel_size");
  auto& v = spec.vit;
  v.depth = get_size("vit.depth");
  v.heads = get_size("vit.heads");
  v.mlp_dim = get_size("vit.mlp_dim");
  v.embed_dim = get_size("vit.embed_dim");
  v.supported_widths = parse_sizes(get("vit.supported_widths"), "vit.supported_widths");
  v.ln_eps = std::strtod(get("vit.ln_eps").c_str(), nullptr);
  spec.mvcnn_hidden = get_size("mvcnn.hidden");
  spec.vit = spec.derived_vit();
  try {
    spec.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint: invalid stored config: ") + e.what());
  }
  return spec;
}

}  // namespace detail

template <class T>
std::string serialize_checkpoint(ModelBundle<T>& bundle) {
  detail::ByteWriter conf, parm, optm, meta, file;
  conf.put_raw(canonical_config<T>(bundle.spec));

  const auto params = bundle.named_parameters();
  parm.put(static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    parm.put_string(name);
    parm.put_tensor(*t);
  }

  const auto& adam = bundle.optimizer;
  optm.put_f64(adam.config.beta1);
  optm.put_f64(adam.config.beta2);
  optm.put_f64(adam.config.eps);
  optm.put(static_cast<std::uint32_t>(adam.moments.size()));
  for (const auto& [name, mom] : adam.moments) {
    optm.put_string(name);
    optm.put(static_cast<std::uint64_t>(mom.step));
    optm.put_tensor(Tensor<T>(Shape{mom.m.size()}, mom.m));
    optm.put_tensor(Tensor<T>(Shape{mom.v.size()}, mom.v));
  }

  meta.put(static_cast<std::uint64_t>(bundle.meta.stage1_done));
  meta.put(static_cast<std::uint64_t>(bundle.meta.stage2_done));
  meta.put(static_cast<std::uint64_t>(bundle.meta.history.size()));
  for (const auto& r : bundle.meta.history) {
    meta.put(static_cast<std::uint32_t>(r.stage));
    meta.put(static_cast<std::uint64_t>(r.epoch));
    meta.put_f64(r.train_loss);
    meta.put_f64(r.val_loss);
  }

  file.put_raw(std::string(kCheckpointMagic, 4));
  file.put(kCheckpointVersion);
  file.put_section("CONF", conf);
  file.put_section("PARM", parm);
  file.put_section("OPTM", optm);
  file.put_section("META", meta);
  return file.bytes();
}

template <class T>
ModelBundle<T> deserialize_checkpoint(const std::string& bytes, const std::string& what = "checkpoint") {
  detail::ByteReader file(bytes, what);
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
    throw FormatError(what + ": bad magic (not a checkpoint)");
  }
  file.get_raw(4);
  const auto version = file.get<std::uint16_t>();
  if (version != kCheckpointVersion) {
    throw FormatError(what + ": unsupported version " + std::to_string(version));
  }
  std::map<std::string, std::string> sections;
  while (!file.done()) {
    const std::string tag = file.get_raw(4);
    const auto len = static_cast<std::size_t>(file.get<std::uint64_t>());
    sections[tag] = file.get_raw(len);
  }
  for (const char* tag : {"CONF", "PARM", "OPTM", "META"}) {
    if (!sections.count(tag)) throw FormatError(what + ": missing section " + tag);
  }

  ModelBundle<T> bundle = make_bundle<T>(detail::parse_canonical_config<T>(sections["CONF"]));

  detail::ByteReader parm(sections["PARM"], what + " PARM");
  std::map<std::string, Tensor<T>> stored;
  const auto n_params = parm.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_params; ++i) {
    std::string name = parm.get_string();
    stored[name] = parm.get_tensor<T>();
  }
  auto params = bundle.named_parameters();
  if (stored.size() != params.size()) throw FormatError(what + ": parameter count does not match the config");
  for (auto& [name, t] : params) {
    const auto it = stored.find(name);
    if (it == stored.end()) throw FormatError(what + ": missing parameter " + name);
    if (it->second.shape() != t->shape()) {
      throw FormatError(what + ": parameter " + name + " has shape " + shape_string(it->second.shape()) +
                        ", config implies " + shape_string(t->shape()));
    }
    std::copy(it->second.data().begin(), it->second.data().end(), t->mutable_data().begin());
  }

  detail::ByteReader optm(sections["OPTM"], what + " OPTM");
  bundle.optimizer.config.beta1 = optm.get_f64();
  bundle.optimizer.config.beta2 = optm.get_f64();
  bundle.optimizer.config.eps = optm.get_f64();
  const auto n_moments = optm.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_moments; ++i) {
    std::string name = optm.get_string();
    AdamMoments<T> mom;
    mom.step = optm.get<std::uint64_t>();
    const Tensor<T> m = optm.get_tensor<T>(), v = optm.get_tensor<T>();
    mom.m.assign(m.data().begin(), m.data().end());
    mom.v.assign(v.data().begin(), v.data().end());
    bundle.optimizer.moments[name] = std::move(mom);
  }

  detail::ByteReader meta(sections["META"], what + " META");
  bundle.meta.stage1_done = static_cast<std::size_t>(meta.get<std::uint64_t>());
  bundle.meta.stage2_done = static_cast<std::size_t>(meta.get<std::uint64_t>());
  const auto n_epochs = meta.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < n_epochs; ++i) {
    EpochRecord r;
    r.stage = static_cast<int>(meta.get<std::uint32_t>());
    r.epoch = static_cast<std::size_t>(meta.get<std::uint64_t>());
    r.train_loss = meta.get_f64();
    r.val_loss = meta.get_f64();
    bundle.meta.history.push_back(r);
  }
  if (!parm.done() || !optm.done() || !meta.done()) throw FormatError(what + ": trailing bytes in a section");
  return bundle;
}

// Written to a temporary file and renamed, so a failed save leaves any
// previous checkpoint intact.
template <class T>
void save_checkpoint(ModelBundle<T>& bundle, const std::filesystem::path& path) {
  const std::string bytes = serialize_checkpoint(bundle);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw InputError("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw InputError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

template <class T>
ModelBundle<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open checkpoint " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return deserialize_checkpoint<T>(buf.str(), "checkpoint " + path.string());
}

}  // namespace studyformer
