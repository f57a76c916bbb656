#include "tandem/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <vector>

#include <zlib.h>

namespace tandem {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

void put_u32(std::vector<unsigned char>& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

class Reader {
 public:
  Reader(const std::vector<unsigned char>& buf, std::size_t end) : buf_(buf), end_(end) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  void bytes(void* dst, std::size_t n) {
    need(n);
    std::memcpy(dst, buf_.data() + pos_, n);
    pos_ += n;
  }
  std::size_t pos() const { return pos_; }
  void seek(std::size_t p) { pos_ = p; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > end_) throw CheckpointError("checkpoint truncated at byte " + std::to_string(pos_));
  }
  const std::vector<unsigned char>& buf_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

std::uint32_t crc_of(const unsigned char* data, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed large regions in chunks.
  while (n > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = crc32(crc, data, chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace

void save_checkpoint(const TensorMap& tensors, const std::filesystem::path& path, std::uint32_t version) {
  std::vector<unsigned char> buf{'T', 'N', 'D', 'M'};
  put_u32(buf, version);
  const std::size_t region = buf.size();
  put_u32(buf, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    put_u32(buf, static_cast<std::uint32_t>(name.size()));
    buf.insert(buf.end(), name.begin(), name.end());
    put_u32(buf, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) put_u32(buf, static_cast<std::uint32_t>(d));
    const auto* p = reinterpret_cast<const unsigned char*>(t.data());
    buf.insert(buf.end(), p, p + t.size() * sizeof(float));
  }
  put_u32(buf, crc_of(buf.data() + region, buf.size() - region));
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!out) throw CheckpointError("failed writing checkpoint " + path.string());
}

TensorMap load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() < 12 || std::memcmp(buf.data(), "TNDM", 4) != 0) {
    throw CheckpointError(path.string() + ": not a checkpoint (bad magic)");
  }
  Reader header(buf, buf.size());
  header.seek(4);
  const std::uint32_t version = header.u32();
  if (version != kCheckpointVersion) {
    throw CheckpointError(path.string() + ": unsupported checkpoint version " + std::to_string(version) +
                          " (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  const std::size_t body_end = buf.size() - 4;
  Reader trailer(buf, buf.size());
  trailer.seek(body_end);
  const std::uint32_t stored = trailer.u32();
  if (crc_of(buf.data() + 8, body_end - 8) != stored) {
    throw CheckpointError(path.string() + ": CRC mismatch, file is corrupted or truncated");
  }
  Reader r(buf, body_end);
  r.seek(8);
  TensorMap tensors;
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name(r.u32(), '\0');
    r.bytes(name.data(), name.size());
    const std::uint32_t rank = r.u32();
    if (rank > 8) throw CheckpointError("checkpoint tensor " + name + " has implausible rank");
    Shape shape;
    for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(r.u32());
    Tensor<float> t(shape);
    r.bytes(t.data(), t.size() * sizeof(float));
    if (!tensors.emplace(name, std::move(t)).second) throw CheckpointError("duplicate tensor " + name);
  }
  if (r.pos() != body_end) throw CheckpointError(path.string() + ": trailing bytes after the last tensor");
  return tensors;
}

// ---------------------------------------------------------------------------

namespace {

Tensor<float> ints(std::initializer_list<int> v) {
  Tensor<float> t({v.size()});
  std::size_t i = 0;
  for (int x : v) t[i++] = static_cast<float>(x);
  return t;
}

Tensor<float> ints(const std::vector<int>& v) {
  Tensor<float> t({v.size()});
  for (std::size_t i = 0; i < v.size(); ++i) t[i] = static_cast<float>(v[i]);
  return t;
}

const Tensor<float>& need(const TensorMap& m, const std::string& name) {
  auto it = m.find(name);
  if (it == m.end()) throw CheckpointError("checkpoint lacks " + name);
  return it->second;
}

std::vector<int> read_ints(const TensorMap& m, const std::string& name) {
  const auto& t = need(m, name);
  std::vector<int> v;
  for (float x : t.values()) v.push_back(static_cast<int>(x));
  return v;
}

Tensor<float> decoder_meta(const DecoderConfig& c) {
  return ints({c.vocab_size, c.d_model, c.n_layers, c.n_heads, c.d_ff, c.max_context});
}

DecoderConfig read_decoder_meta(const TensorMap& m, const std::string& name) {
  const auto v = read_ints(m, name);
  if (v.size() != 6) throw CheckpointError(name + " has the wrong length");
  DecoderConfig c{v[0], v[1], v[2], v[3], v[4], v[5]};
  c.validate();
  return c;
}

void put_params(TensorMap& out, const ParameterSet<float>& ps, const std::string& strip = "") {
  for (const auto& [name, t] : ps.export_values()) {
    out.emplace(name.rfind(strip, 0) == 0 ? name.substr(strip.size()) : name, t);
  }
}

void require_kind(const TensorMap& m, ModelKind kind) {
  if (checkpoint_kind(m) != kind) throw CheckpointError("checkpoint holds a different kind of model");
}

}  // namespace

ModelKind checkpoint_kind(const TensorMap& tensors) {
  const auto v = read_ints(tensors, "meta/kind");
  if (v.size() != 1 || v[0] < 1 || v[0] > 4) throw CheckpointError("unknown model kind");
  return static_cast<ModelKind>(v[0]);
}

TensorMap bundle_decoder(DecoderModel<float>& model) {
  TensorMap m{{"meta/kind", ints({static_cast<int>(ModelKind::DECODER)})}, {"meta/decoder", decoder_meta(model.config())}};
  put_params(m, model.parameters(), model.prefix());
  return m;
}

TensorMap bundle_tandem(TandemModel<float>& model) {
  const auto& c = model.config();
  TensorMap m{{"meta/kind", ints({static_cast<int>(ModelKind::TANDEM)})},
              {"meta/primary", decoder_meta(c.primary)},
              {"meta/secondary", decoder_meta(c.secondary)},
              {"meta/tandem", ints({c.gamma, c.free_token ? 1 : 0})},
              {"meta/layer_map", ints(model.layer_map())}};
  put_params(m, model.parameters());
  return m;
}

TensorMap bundle_deep(DeepTandemModel<float>& model) {
  const auto& c = model.config();
  TensorMap m{{"meta/kind", ints({static_cast<int>(ModelKind::DEEP_TANDEM)})},
              {"meta/large", decoder_meta(c.large)},
              {"meta/small", decoder_meta(c.small)},
              {"meta/deep", ints({c.gamma, c.begin_token})}};
  put_params(m, model.parameters());
  return m;
}

TensorMap bundle_router(RouterMLP<float>& router, const RouterConfig& config, const RouterDataset* dataset) {
  TensorMap m{{"meta/kind", ints({static_cast<int>(ModelKind::ROUTER)})},
              {"meta/router", ints({config.k, config.hidden_dim, config.gamma_max, config.invert_threshold ? 1 : 0})},
              {"meta/router_tau", Tensor<float>({1}, std::vector<float>{static_cast<float>(config.tau)})}};
  put_params(m, router.parameters());
  if (dataset && dataset->size() > 0) {
    m.emplace("dataset/features", dataset->features);
    m.emplace("dataset/targets", Tensor<float>({dataset->targets.size()}, dataset->targets));
  }
  return m;
}

std::unique_ptr<DecoderModel<float>> unbundle_decoder(const TensorMap& m) {
  require_kind(m, ModelKind::DECODER);
  auto model = std::make_unique<DecoderModel<float>>(read_decoder_meta(m, "meta/decoder"), "", 0);
  model->parameters().import_values(m);
  return model;
}

std::unique_ptr<TandemModel<float>> unbundle_tandem(const TensorMap& m) {
  require_kind(m, ModelKind::TANDEM);
  TandemConfig c;
  c.primary = read_decoder_meta(m, "meta/primary");
  c.secondary = read_decoder_meta(m, "meta/secondary");
  const auto t = read_ints(m, "meta/tandem");
  if (t.size() != 2) throw CheckpointError("meta/tandem has the wrong length");
  c.gamma = t[0];
  c.free_token = t[1] != 0;
  c.layer_map = read_ints(m, "meta/layer_map");
  auto model = std::make_unique<TandemModel<float>>(c, 0);
  model->parameters().import_values(m);
  return model;
}

std::unique_ptr<DeepTandemModel<float>> unbundle_deep(const TensorMap& m) {
  require_kind(m, ModelKind::DEEP_TANDEM);
  DeepTandemConfig c;
  c.large = read_decoder_meta(m, "meta/large");
  c.small = read_decoder_meta(m, "meta/small");
  const auto d = read_ints(m, "meta/deep");
  if (d.size() != 2) throw CheckpointError("meta/deep has the wrong length");
  c.gamma = d[0];
  c.begin_token = d[1];
  auto model = std::make_unique<DeepTandemModel<float>>(c, 0);
  model->parameters().import_values(m);
  return model;
}

LoadedRouter unbundle_router(const TensorMap& m) {
  require_kind(m, ModelKind::ROUTER);
  const auto v = read_ints(m, "meta/router");
  if (v.size() != 4) throw CheckpointError("meta/router has the wrong length");
  LoadedRouter out;
  out.config.k = v[0];
  out.config.hidden_dim = v[1];
  out.config.gamma_max = v[2];
  out.config.invert_threshold = v[3] != 0;
  out.config.tau = need(m, "meta/router_tau")[0];
  out.config.validate();
  const auto& w1 = need(m, "router.w1");
  out.router = std::make_unique<RouterMLP<float>>(static_cast<int>(w1.dim(0)), static_cast<int>(w1.dim(1)), 0);
  out.router->parameters().import_values(m);
  if (m.count("dataset/features")) {
    out.dataset.features = need(m, "dataset/features");
    const auto& t = need(m, "dataset/targets");
    out.dataset.targets.assign(t.values().begin(), t.values().end());
  }
  return out;
}

}  // namespace tandem
