#include "casdgr/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace casdgr {

namespace {

constexpr char kMagic[8] = {'C', 'A', 'S', 'D', 'G', 'R', 'C', 'K'};

class Writer {
 public:
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u64(s.size());
    out_.insert(out_.end(), s.begin(), s.end());
  }
  void raw(const char* p, size_t n) { out_.insert(out_.end(), p, p + n); }
  void tensors(const std::vector<StoredTensor>& ts) {
    u64(ts.size());
    for (const auto& t : ts) {
      str(t.name);
      u32(static_cast<std::uint32_t>(t.shape.size()));
      for (Index d : t.shape) u64(static_cast<std::uint64_t>(d));
      for (Index i = 0; i < t.values.size(); ++i) f64(t.values[i]);
    }
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  void put(std::uint64_t v, int bytes) {
    for (int i = 0; i < bytes; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& in) : in_(in) {}
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    const std::uint64_t n = u64();
    need(n);
    std::string s(in_.begin() + pos_, in_.begin() + pos_ + n);
    pos_ += n;
    return s;
  }
  void expect_raw(const char* p, size_t n) {
    need(n);
    if (std::memcmp(in_.data() + pos_, p, n) != 0) throw CheckpointError("not a casdgr checkpoint (bad magic)");
    pos_ += n;
  }
  std::vector<StoredTensor> tensors() {
    const std::uint64_t count = u64();
    std::vector<StoredTensor> ts;
    for (std::uint64_t k = 0; k < count; ++k) {
      StoredTensor t;
      t.name = str();
      const std::uint32_t rank = u32();
      if (rank > 8) throw CheckpointError("corrupt checkpoint: tensor rank " + std::to_string(rank));
      for (std::uint32_t d = 0; d < rank; ++d) t.shape.push_back(static_cast<Index>(u64()));
      const Index n = numel(t.shape);
      need(static_cast<std::uint64_t>(n) * 8);
      t.values.resize(n);
      for (Index i = 0; i < n; ++i) t.values[i] = f64();
      ts.push_back(std::move(t));
    }
    return ts;
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  void need(std::uint64_t n) const {
    if (n > in_.size() - pos_) throw CheckpointError("truncated checkpoint");
  }
  std::uint64_t get(int bytes) {
    need(bytes);
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(in_[pos_ + i]) << (8 * i);
    pos_ += bytes;
    return v;
  }
  const std::vector<std::uint8_t>& in_;
  size_t pos_ = 0;
};

std::vector<StoredTensor> store(const nn::ParamList& params, const std::vector<Eigen::VectorXd>* values = nullptr) {
  std::vector<StoredTensor> out;
  for (size_t i = 0; i < params.size(); ++i) {
    out.push_back({params[i].name, params[i].tensor.shape(), values ? (*values)[i] : params[i].tensor.values()});
  }
  return out;
}

std::vector<Eigen::VectorXd> match(const std::vector<StoredTensor>& stored, const nn::ParamList& params,
                                   const char* what) {
  if (stored.size() != params.size()) {
    throw CheckpointError(std::string(what) + ": checkpoint has " + std::to_string(stored.size()) +
                          " tensors, model has " + std::to_string(params.size()));
  }
  std::vector<Eigen::VectorXd> out;
  for (size_t i = 0; i < params.size(); ++i) {
    if (stored[i].name != params[i].name) {
      throw CheckpointError(std::string(what) + ": expected '" + params[i].name + "', found '" + stored[i].name + "'");
    }
    if (stored[i].shape != params[i].tensor.shape()) {
      throw CheckpointError(std::string(what) + ": shape mismatch for " + params[i].name + ": checkpoint " +
                            to_string(stored[i].shape) + ", model " + to_string(params[i].tensor.shape()));
    }
    out.push_back(stored[i].values);
  }
  return out;
}

}  // namespace

std::vector<std::uint8_t> encode(const Checkpoint& c) {
  Writer w;
  w.raw(kMagic, sizeof kMagic);
  w.u32(c.version);
  w.str(c.config_text);
  w.u64(c.epoch);
  w.u64(c.optimizer_steps);
  w.str(c.rng_state);
  w.u64(c.epoch_losses.size());
  for (double l : c.epoch_losses) w.f64(l);
  w.tensors(c.params);
  w.tensors(c.adam_m);
  w.tensors(c.adam_v);
  return w.take();
}

Checkpoint decode(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  r.expect_raw(kMagic, sizeof kMagic);
  Checkpoint c;
  c.version = r.u32();
  if (c.version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(c.version) + " (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  c.config_text = r.str();
  c.epoch = r.u64();
  c.optimizer_steps = r.u64();
  c.rng_state = r.str();
  const std::uint64_t n_losses = r.u64();
  for (std::uint64_t i = 0; i < n_losses; ++i) c.epoch_losses.push_back(r.f64());
  c.params = r.tensors();
  c.adam_m = r.tensors();
  c.adam_v = r.tensors();
  if (!r.done()) throw CheckpointError("trailing bytes after checkpoint");
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto bytes = encode(ckpt);
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw CheckpointError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode(bytes);
}

Checkpoint capture(const RunConfig& config, const CascadeModel& model, const Adam& adam, std::uint64_t epoch,
                   const Rng& rng, std::vector<double> epoch_losses) {
  Checkpoint c;
  c.config_text = to_text(config);
  c.epoch = epoch;
  c.optimizer_steps = adam.steps();
  c.rng_state = rng.state();
  const auto params = model.parameters();
  c.params = store(params);
  c.adam_m = store(params, &adam.first_moments());
  c.adam_v = store(params, &adam.second_moments());
  c.epoch_losses = std::move(epoch_losses);
  return c;
}

void restore_params(const Checkpoint& ckpt, CascadeModel& model) {
  auto params = model.parameters();
  auto values = match(ckpt.params, params, "parameters");
  for (size_t i = 0; i < params.size(); ++i) params[i].tensor.mutable_data() = values[i];
}

void restore_optimizer(const Checkpoint& ckpt, Adam& adam) {
  auto m = match(ckpt.adam_m, adam.params(), "adam first moments");
  auto v = match(ckpt.adam_v, adam.params(), "adam second moments");
  adam.restore(ckpt.optimizer_steps, std::move(m), std::move(v));
}

CascadeModel load_model(const std::filesystem::path& path, RunConfig* config_out) {
  const Checkpoint ckpt = load_checkpoint(path);
  const RunConfig config = parse_config(ckpt.config_text);
  CascadeModel model = build(config.model, config.train.seed);
  restore_params(ckpt, model);
  if (config_out) *config_out = config;
  return model;
}

}  // namespace casdgr
