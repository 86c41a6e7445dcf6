#include "visreview/nn.hpp"

#include <cmath>

#include "visreview/error.hpp"
#include "visreview/serialize.hpp"

namespace vr {

std::string to_string(Activation a) {
  switch (a) {
    case Activation::none: return "none";
    case Activation::mish: return "mish";
    case Activation::softmax: return "softmax";
  }
  return "none";
}

Activation parse_activation(const std::string& name) {
  if (name == "none") return Activation::none;
  if (name == "mish") return Activation::mish;
  if (name == "softmax") return Activation::softmax;
  fail(ErrorCode::UnknownKind, "unknown activation '" + name + "'");
}

Tensor glorot_uniform(Tensor::Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  if (fan_in + fan_out == 0) fail(ErrorCode::InvalidConfig, "glorot_uniform with zero fan");
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(-limit, limit);
  return t;
}

DenseLayer make_dense(const std::string& name, std::size_t in, std::size_t out, Activation activation, Rng& rng) {
  if (in == 0 || out == 0) fail(ErrorCode::InvalidConfig, "dense layer '" + name + "' needs positive sizes");
  DenseLayer layer;
  layer.weight = {name + ".weight", glorot_uniform({out, in}, in, out, rng)};
  layer.bias = {name + ".bias", Tensor({out})};
  layer.activation = activation;
  return layer;
}

Var dense_forward(Tape& tape, const DenseLayer& layer, Var x) {
  if (x.value().rank() != 1 || x.value().dim(0) != layer.in_dim()) {
    fail(ErrorCode::DimensionMismatch, "dense layer '" + layer.weight.name + "' expects length " +
                                           std::to_string(layer.in_dim()) + ", got " + x.value().shape_string());
  }
  Var y = add(matmul(tape.param(layer.weight), x), tape.param(layer.bias));
  switch (layer.activation) {
    case Activation::none: return y;
    case Activation::mish: return mish(y);
    case Activation::softmax: return softmax(y);
  }
  return y;
}

GruCell make_gru(const std::string& name, std::size_t input_dim, std::size_t hidden_dim, Rng& rng) {
  if (input_dim == 0 || hidden_dim == 0) fail(ErrorCode::InvalidConfig, "GRU '" + name + "' needs positive sizes");
  auto w = [&](const char* suffix) {
    return Parameter{name + "." + suffix, glorot_uniform({hidden_dim, input_dim}, input_dim, hidden_dim, rng)};
  };
  auto u = [&](const char* suffix) {
    return Parameter{name + "." + suffix, glorot_uniform({hidden_dim, hidden_dim}, hidden_dim, hidden_dim, rng)};
  };
  auto b = [&](const char* suffix) { return Parameter{name + "." + suffix, Tensor({hidden_dim})}; };
  GruCell cell;
  cell.wz = w("wz");
  cell.uz = u("uz");
  cell.bz = b("bz");
  cell.wr = w("wr");
  cell.ur = u("ur");
  cell.br = b("br");
  cell.wh = w("wh");
  cell.uh = u("uh");
  cell.bh = b("bh");
  return cell;
}

Var gru_step(Tape& tape, const GruCell& cell, Var x, Var h_prev) {
  if (x.value().rank() != 1 || x.value().dim(0) != cell.input_dim()) {
    fail(ErrorCode::DimensionMismatch, "GRU '" + cell.wz.name + "' expects input length " +
                                           std::to_string(cell.input_dim()) + ", got " + x.value().shape_string());
  }
  if (h_prev.value().rank() != 1 || h_prev.value().dim(0) != cell.hidden_dim()) {
    fail(ErrorCode::DimensionMismatch, "GRU '" + cell.wz.name + "' expects state length " +
                                           std::to_string(cell.hidden_dim()) + ", got " +
                                           h_prev.value().shape_string());
  }
  auto gate = [&](const Parameter& w, const Parameter& u, const Parameter& b, Var state) {
    return add(add(matmul(tape.param(w), x), matmul(tape.param(u), state)), tape.param(b));
  };
  Var z = sigmoid(gate(cell.wz, cell.uz, cell.bz, h_prev));
  Var r = sigmoid(gate(cell.wr, cell.ur, cell.br, h_prev));
  Var candidate = tanh(gate(cell.wh, cell.uh, cell.bh, mul(r, h_prev)));
  return add(h_prev, mul(z, sub(candidate, h_prev)));
}

void BackboneConfig::validate() const {
  if (in_channels == 0) fail(ErrorCode::InvalidConfig, "backbone needs at least one input channel");
  if (stages.empty()) fail(ErrorCode::InvalidConfig, "backbone needs at least one conv stage");
  for (const auto& s : stages) {
    if (s.filters == 0 || s.kernel == 0 || s.stride == 0) {
      fail(ErrorCode::InvalidConfig, "backbone stage sizes must be positive");
    }
  }
  if (stages.back().filters != output_dim) {
    fail(ErrorCode::InvalidConfig, "last backbone stage must have output_dim (" + std::to_string(output_dim) +
                                       ") filters");
  }
}

std::size_t BackboneConfig::output_side(std::size_t size) const {
  for (const auto& s : stages) {
    if (s.kernel > size) {
      fail(ErrorCode::KernelLargerThanInput, "backbone stage kernel " + std::to_string(s.kernel) +
                                                 " exceeds feature side " + std::to_string(size));
    }
    size = (size - s.kernel) / s.stride + 1;
  }
  return size;
}

BackboneConfig BackboneConfig::small(std::size_t in_channels, std::size_t output_dim, std::uint64_t seed) {
  BackboneConfig c;
  c.in_channels = in_channels;
  c.stages = {{8, 3, 2}, {16, 3, 2}, {output_dim, 3, 1}};
  c.output_dim = output_dim;
  c.seed = seed;
  return c;
}

void to_json(nlohmann::json& j, const BackboneConfig& c) {
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& s : c.stages) stages.push_back({{"filters", s.filters}, {"kernel", s.kernel}, {"stride", s.stride}});
  j = {{"in_channels", c.in_channels}, {"stages", stages}, {"output_dim", c.output_dim}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, BackboneConfig& c) {
  c.in_channels = j.at("in_channels").get<std::size_t>();
  c.output_dim = j.at("output_dim").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.stages.clear();
  for (const auto& s : j.at("stages")) {
    c.stages.push_back({s.at("filters").get<std::size_t>(), s.at("kernel").get<std::size_t>(),
                        s.at("stride").get<std::size_t>()});
  }
}

std::vector<Parameter*> Backbone::parameters() {
  std::vector<Parameter*> out;
  for (std::size_t i = 0; i < kernels.size(); ++i) {
    out.push_back(&kernels[i]);
    out.push_back(&biases[i]);
  }
  return out;
}

Backbone make_backbone(const std::string& name, const BackboneConfig& config) {
  config.validate();
  Backbone net;
  net.config = config;
  Rng rng(config.seed, 0x6261636b);
  std::size_t channels = config.in_channels;
  for (std::size_t i = 0; i < config.stages.size(); ++i) {
    const auto& s = config.stages[i];
    const std::size_t area = s.kernel * s.kernel;
    const std::string prefix = name + ".conv" + std::to_string(i);
    net.kernels.push_back({prefix + ".kernel", glorot_uniform({s.filters, channels, s.kernel, s.kernel},
                                                               channels * area, s.filters * area, rng)});
    net.biases.push_back({prefix + ".bias", Tensor({s.filters})});
    channels = s.filters;
  }
  return net;
}

Var backbone_forward(Tape& tape, const Backbone& net, Var image) {
  const Tensor& img = image.value();
  if (img.rank() != 3 || img.dim(0) != net.config.in_channels) {
    fail(ErrorCode::DimensionMismatch, "backbone expects " + std::to_string(net.config.in_channels) +
                                           " input channels, got " + img.shape_string());
  }
  Var x = image;
  for (std::size_t i = 0; i < net.kernels.size(); ++i) {
    const int stride = static_cast<int>(net.config.stages[i].stride);
    x = mish(add_channel_bias(conv2d(x, tape.param(net.kernels[i]), stride), tape.param(net.biases[i])));
  }
  return global_avg_pool(x);
}

namespace {

std::string blob_name(const std::string& param_name) {
  std::string out = param_name;
  for (auto& ch : out) {
    if (ch == '/' || ch == '\\') ch = '_';
  }
  return out + ".hrtn";
}

}  // namespace

void save_checkpoint(const std::filesystem::path& dir, const nlohmann::json& header,
                     std::span<Parameter* const> params) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) fail(ErrorCode::IoError, "cannot create checkpoint directory " + dir.string());
  nlohmann::json full = header;
  nlohmann::json index = nlohmann::json::array();
  for (const Parameter* p : params) {
    const std::string file = blob_name(p->name);
    write_tensor(dir / file, p->value);
    index.push_back({{"name", p->name}, {"shape", p->value.shape()}, {"file", file}});
  }
  full["tensors"] = index;
  write_file(dir / "header.json", full.dump(2) + "\n");
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  Checkpoint ckpt;
  try {
    ckpt.header = nlohmann::json::parse(read_file(dir / "header.json"));
    for (const auto& entry : ckpt.header.at("tensors")) {
      const auto name = entry.at("name").get<std::string>();
      Tensor t = read_tensor(dir / entry.at("file").get<std::string>());
      if (t.shape() != entry.at("shape").get<Tensor::Shape>()) {
        fail(ErrorCode::CorruptManifest, "tensor '" + name + "' shape differs from its header entry");
      }
      ckpt.tensors.emplace(name, std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::CorruptManifest, "bad checkpoint header in " + dir.string() + ": " + e.what());
  }
  return ckpt;
}

void restore_parameters(const Checkpoint& ckpt, std::span<Parameter* const> params) {
  for (Parameter* p : params) {
    auto it = ckpt.tensors.find(p->name);
    if (it == ckpt.tensors.end()) fail(ErrorCode::CorruptManifest, "checkpoint lacks '" + p->name + "'");
    if (it->second.shape() != p->value.shape()) {
      fail(ErrorCode::ShapeMismatch, "checkpoint tensor '" + p->name + "' has shape " + it->second.shape_string() +
                                         ", model expects " + p->value.shape_string());
    }
    p->value = it->second;
  }
}

}  // namespace vr
