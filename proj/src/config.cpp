#include "visreview/config.hpp"

#include "visreview/error.hpp"
#include "visreview/serialize.hpp"

namespace vr {

namespace {

using ojson = nlohmann::ordered_json;

ojson stages_json(const BackboneConfig& b) {
  ojson stages = ojson::array();
  for (const auto& s : b.stages) stages.push_back({{"filters", s.filters}, {"kernel", s.kernel}, {"stride", s.stride}});
  return stages;
}

std::vector<ConvStage> parse_stages(const ojson& j) {
  std::vector<ConvStage> stages;
  for (const auto& s : j) {
    stages.push_back({s.at("filters").get<std::size_t>(), s.at("kernel").get<std::size_t>(),
                      s.at("stride").get<std::size_t>()});
  }
  return stages;
}

std::string where(const std::string& path) { return path.empty() ? "top level" : "'" + path + "'"; }

// Every key of `user` must exist in `reference`, with a compatible type.
void check_against(const ojson& user, const ojson& reference, const std::string& path) {
  auto bad_type = [&](const char* expected) {
    fail(ErrorCode::InvalidConfig, "config value at " + where(path) + " must be " + expected);
  };
  switch (reference.type()) {
    case ojson::value_t::object:
      if (!user.is_object()) bad_type("an object");
      for (const auto& [key, value] : user.items()) {
        const std::string child = path.empty() ? key : path + "." + key;
        if (!reference.contains(key)) fail(ErrorCode::InvalidConfig, "unknown config key '" + child + "'");
        check_against(value, reference.at(key), child);
      }
      break;
    case ojson::value_t::array:
      if (!user.is_array()) bad_type("an array");
      if (!reference.empty()) {
        for (std::size_t i = 0; i < user.size(); ++i) {
          check_against(user[i], reference.front(), path + "[" + std::to_string(i) + "]");
        }
      }
      break;
    case ojson::value_t::number_unsigned:
      if (!user.is_number_unsigned()) bad_type("a non-negative integer");
      break;
    case ojson::value_t::number_integer:
      if (!user.is_number_integer()) bad_type("an integer");
      break;
    case ojson::value_t::number_float:
      if (!user.is_number()) bad_type("a number");
      break;
    case ojson::value_t::boolean:
      if (!user.is_boolean()) bad_type("true or false");
      break;
    case ojson::value_t::string:
      if (!user.is_string()) bad_type("a string");
      break;
    default:
      break;
  }
}

RunConfig from_full_json(const ojson& j) {
  RunConfig c;
  const auto& d = j.at("dataset");
  c.dataset.n_classes = d.at("n_classes").get<std::size_t>();
  c.dataset.per_score = d.at("per_score").get<std::size_t>();
  c.dataset.image_size = d.at("image_size").get<std::size_t>();
  c.dataset.channels = d.at("channels").get<std::size_t>();
  c.dataset.augment = d.at("augment").get<std::size_t>();
  c.dataset.seed = d.at("seed").get<std::uint64_t>();
  c.dataset.decoys = d.at("decoys").get<bool>();
  c.dataset.score_low = d.at("score_low").get<int>();
  c.dataset.score_high = d.at("score_high").get<int>();

  const auto& m = j.at("model");
  const auto& h = m.at("higher");
  c.higher.backbone.stages = parse_stages(h.at("stages"));
  c.higher.hidden = h.at("hidden").get<std::vector<std::size_t>>();
  c.higher.dropout = h.at("dropout").get<double>();
  const auto& x = m.at("extractor");
  c.extractor.backbone.stages = parse_stages(x.at("stages"));
  c.extractor.hidden = x.at("hidden").get<std::vector<std::size_t>>();
  const auto& l = m.at("lower");
  c.encoder_hidden = l.at("encoder_hidden").get<std::size_t>();
  c.decoder_hidden = l.at("decoder_hidden").get<std::size_t>();
  c.attention_dim = l.at("attention_dim").get<std::size_t>();
  c.window = m.at("tiling").at("window").get<std::size_t>();
  c.stride = m.at("tiling").at("stride").get<std::size_t>();
  c.extra_class = m.at("extra_class").get<bool>();

  const auto& t = j.at("train");
  c.train.batch_size = t.at("batch_size").get<std::size_t>();
  c.train.epochs = t.at("epochs").get<std::size_t>();
  c.train.adam.learning_rate = t.at("learning_rate").get<double>();
  c.train.adam.beta1 = t.at("beta1").get<double>();
  c.train.adam.beta2 = t.at("beta2").get<double>();
  c.train.adam.epsilon = t.at("epsilon").get<double>();
  c.train.freeze_fx = t.at("freeze_fx").get<bool>();
  c.split.train = t.at("split").at("train").get<std::size_t>();
  c.split.val = t.at("split").at("val").get<std::size_t>();

  c.gamma = j.at("metrics").at("gamma").get<int>();
  c.output_dir = j.at("output_dir").get<std::string>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

}  // namespace

RunConfig RunConfig::desk() { return RunConfig{}; }

RunConfig RunConfig::paper() {
  RunConfig c;
  c.dataset.image_size = 224;
  c.dataset.channels = 3;
  c.higher.backbone.stages = {{32, 3, 2}, {64, 3, 2}, {128, 3, 2}, {256, 3, 2}, {1536, 3, 1}};
  c.higher.hidden = {1024, 512, 256};
  c.extractor.backbone.stages = {{32, 3, 2}, {64, 3, 2}, {128, 3, 2}, {2048, 3, 1}};
  c.extractor.hidden = {1024, 512};
  c.encoder_hidden = 256;
  c.decoder_hidden = 256;
  c.attention_dim = 256;
  c.window = 64;
  c.stride = 32;
  c.train.batch_size = 128;
  return c;
}

ModelConfig RunConfig::model() const {
  ModelConfig m;
  m.higher = higher;
  m.higher.n_classes = dataset.n_classes;
  m.higher.backbone.in_channels = dataset.channels;
  if (!higher.backbone.stages.empty()) m.higher.backbone.output_dim = higher.backbone.stages.back().filters;
  m.extractor = extractor;
  m.extractor.backbone.in_channels = dataset.channels;
  if (!extractor.backbone.stages.empty()) m.extractor.backbone.output_dim = extractor.backbone.stages.back().filters;
  m.lower.input_dim = extractor.hidden.empty() ? 0 : extractor.hidden.back();
  m.lower.encoder_hidden = encoder_hidden;
  m.lower.decoder_hidden = decoder_hidden;
  m.lower.attention_dim = attention_dim;
  m.lower.score_levels = dataset.score_levels();
  m.spec = {dataset.image_size, window, stride};
  m.scores = {dataset.score_low, dataset.score_high};
  m.extra_class = extra_class;
  return m;
}

TrainConfig RunConfig::training(std::size_t threads) const {
  TrainConfig t = train;
  t.seed = seed;
  t.threads = threads;
  return t;
}

void RunConfig::validate() const {
  try {
    dataset.validate();
    if (higher.backbone.stages.empty() || extractor.backbone.stages.empty()) {
      fail(ErrorCode::InvalidConfig, "backbones need at least one stage");
    }
    model().validate();
    train.validate();
    if (split.train == 0 || split.val == 0) fail(ErrorCode::InvalidConfig, "split parts must both be positive");
    if (gamma < 0) fail(ErrorCode::InvalidConfig, "metrics.gamma must be non-negative");
    if (output_dir.empty()) fail(ErrorCode::InvalidConfig, "output_dir must not be empty");
  } catch (const Error& e) {
    if (e.code() == ErrorCode::InvalidConfig) throw;
    fail(ErrorCode::InvalidConfig, e.what());
  }
}

ojson config_json(const RunConfig& c) {
  ojson j;
  j["dataset"] = {{"n_classes", c.dataset.n_classes}, {"per_score", c.dataset.per_score},
                  {"image_size", c.dataset.image_size}, {"channels", c.dataset.channels},
                  {"augment", c.dataset.augment},     {"seed", c.dataset.seed},
                  {"decoys", c.dataset.decoys},       {"score_low", c.dataset.score_low},
                  {"score_high", c.dataset.score_high}};
  ojson model;
  model["higher"] = {{"stages", stages_json(c.higher.backbone)},
                     {"hidden", c.higher.hidden},
                     {"dropout", c.higher.dropout}};
  model["extractor"] = {{"stages", stages_json(c.extractor.backbone)}, {"hidden", c.extractor.hidden}};
  model["lower"] = {{"encoder_hidden", c.encoder_hidden},
                    {"decoder_hidden", c.decoder_hidden},
                    {"attention_dim", c.attention_dim}};
  model["tiling"] = {{"window", c.window}, {"stride", c.stride}};
  model["extra_class"] = c.extra_class;
  j["model"] = model;
  j["train"] = {{"batch_size", c.train.batch_size},
                {"epochs", c.train.epochs},
                {"learning_rate", c.train.adam.learning_rate},
                {"beta1", c.train.adam.beta1},
                {"beta2", c.train.adam.beta2},
                {"epsilon", c.train.adam.epsilon},
                {"freeze_fx", c.train.freeze_fx},
                {"split", {{"train", c.split.train}, {"val", c.split.val}}}};
  j["metrics"] = {{"gamma", c.gamma}};
  j["output_dir"] = c.output_dir;
  j["seed"] = c.seed;
  return j;
}

RunConfig parse_config(const std::string& text) {
  ojson user;
  try {
    user = ojson::parse(text);
  } catch (const ojson::parse_error& e) {
    fail(ErrorCode::InvalidConfig, std::string("config is not valid JSON: ") + e.what());
  }
  ojson full = config_json(RunConfig::desk());
  check_against(user, full, "");
  full.merge_patch(user);
  RunConfig c;
  try {
    c = from_full_json(full);
  } catch (const ojson::exception& e) {
    fail(ErrorCode::InvalidConfig, std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

RunConfig load_config(const std::string& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const Error& e) {
    fail(ErrorCode::InvalidConfig, e.what());
  }
  return parse_config(text);
}

}  // namespace vr
