#include "fbformer/config.hpp"

#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "fbformer/rng.hpp"

namespace fbf {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::string unquote(const std::string& s) {
  if (s.size() >= 2 && ((s.front() == '"' && s.back() == '"') || (s.front() == '\'' && s.back() == '\''))) {
    return s.substr(1, s.size() - 2);
  }
  return s;
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <class T, std::size_t N>
std::string fmt_array(const std::array<T, N>& a) {
  std::string s = "[";
  for (std::size_t i = 0; i < N; ++i) s += (i ? ", " : "") + std::to_string(a[i]);
  return s + "]";
}

std::array<int, 4> get_int4(const KeyValueConfig& kv, const std::string& key) {
  const auto items = kv.get_list(key);
  if (items.size() != 4) {
    throw ConfigError(key + ": expected 4 values, got " + std::to_string(items.size()));
  }
  std::array<int, 4> out{};
  for (std::size_t i = 0; i < 4; ++i) {
    try {
      out[i] = std::stoi(items[i]);
    } catch (const std::exception&) {
      throw ConfigError(key + ": '" + items[i] + "' is not an integer");
    }
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------

EncoderConfig EncoderConfig::preset(const std::string& variant) {
  EncoderConfig c;
  c.variant = variant;
  if (variant == "S12") {
    c.depths = {2, 2, 6, 2};
  } else if (variant == "S24") {
    c.depths = {4, 4, 12, 4};
  } else if (variant == "S36") {
    c.depths = {6, 6, 18, 6};
  } else if (variant == "custom") {
    // dims/depths/heads are expected to be overridden explicitly.
  } else {
    throw ConfigError("unknown encoder variant '" + variant + "' (valid: S12, S24, S36, custom)");
  }
  return c;
}

void EncoderConfig::validate() const {
  for (int s = 0; s < 4; ++s) {
    if (dims[s] <= 0 || depths[s] < 0 || heads[s] <= 0) {
      throw ConfigError("encoder stage " + std::to_string(s + 1) + ": dims/depths/heads must be positive");
    }
    if (dims[s] % heads[s] != 0) {
      throw ConfigError("encoder stage " + std::to_string(s + 1) + ": dim " + std::to_string(dims[s]) +
                        " not divisible by " + std::to_string(heads[s]) + " heads");
    }
  }
  if (mlp_ratio <= 0) throw ConfigError("encoder.mlp_ratio must be positive");
  if (hidden_dim(0) <= 0) throw ConfigError("encoder.mlp_ratio too small");
}

int EncoderConfig::hidden_dim(int stage) const {
  return static_cast<int>(static_cast<double>(dims[stage]) * mlp_ratio + 0.5);
}

void DecoderConfig::validate() const {
  if (channels <= 0) throw ConfigError("decoder.channels must be positive");
  if (norm_groups <= 0) throw ConfigError("decoder.norm_groups must be positive");
}

int DecoderConfig::groups_for(int ch) const { return std::gcd(ch, norm_groups); }

const char* to_string(FeedbackMode mode) {
  switch (mode) {
    case FeedbackMode::none: return "none";
    case FeedbackMode::lite: return "lite";
    case FeedbackMode::attn_self: return "attn_self";
    case FeedbackMode::attn_st: return "attn_st";
  }
  return "?";
}

FeedbackMode parse_feedback_mode(const std::string& name) {
  if (name == "none") return FeedbackMode::none;
  if (name == "lite") return FeedbackMode::lite;
  if (name == "attn_self") return FeedbackMode::attn_self;
  if (name == "attn_st") return FeedbackMode::attn_st;
  throw ConfigError("unknown feedback.mode '" + name + "' (valid: none, lite, attn_self, attn_st)");
}

void ModelConfig::validate() const {
  encoder.validate();
  decoder.validate();
  if (num_classes < 2) throw ConfigError("model.num_classes must be >= 2");
  if (feedback.attn_downsample < 1) throw ConfigError("feedback.attn_downsample must be >= 1");
}

void LossConfig::validate() const {
  if (lambda1 < 0 || lambda2 < 0 || lambda3 < 0 || alpha < 0) {
    throw ConfigError("loss weights must be non-negative");
  }
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (!(lr0 > 0)) throw ConfigError("train.lr must be > 0");
  if (eval_every < 1) throw ConfigError("train.eval_every must be >= 1");
}

// ---------------------------------------------------------------------------

KeyValueConfig KeyValueConfig::parse(const std::string& text) {
  KeyValueConfig kv;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    // Strip comments outside quotes.
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
      if (line[i] == '"') quoted = !quoted;
      if (line[i] == '#' && !quoted) {
        line.resize(i);
        break;
      }
    }
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value'");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    kv.values_[key] = value;
  }
  return kv;
}

KeyValueConfig KeyValueConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::string KeyValueConfig::get_string(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("missing config key '" + key + "'");
  return unquote(it->second);
}

double KeyValueConfig::get_double(const std::string& key) const {
  const auto s = get_string(key);
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError(key + ": '" + s + "' is not a number");
  }
}

std::int64_t KeyValueConfig::get_int(const std::string& key) const {
  const auto s = get_string(key);
  try {
    std::size_t used = 0;
    const long long v = std::stoll(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError(key + ": '" + s + "' is not an integer");
  }
}

bool KeyValueConfig::get_bool(const std::string& key) const {
  const auto s = get_string(key);
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError(key + ": '" + s + "' is not a boolean");
}

std::vector<std::string> KeyValueConfig::get_list(const std::string& key) const {
  auto s = get_string(key);
  if (s.size() < 2 || s.front() != '[' || s.back() != ']') {
    throw ConfigError(key + ": expected a [a, b, ...] list");
  }
  s = s.substr(1, s.size() - 2);
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = unquote(trim(item));
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

RunConfig run_config_from(const KeyValueConfig& kv) {
  static const std::set<std::string> known = {
      "model.num_classes", "model.dtype", "model.seed",
      "encoder.variant", "encoder.dims", "encoder.depths", "encoder.heads", "encoder.mlp_ratio",
      "decoder.channels", "decoder.topdown", "decoder.norm_groups",
      "feedback.mode", "feedback.beta_init", "feedback.attn_downsample", "feedback.train_both_rounds",
      "loss.lambda1", "loss.lambda2", "loss.lambda3", "loss.alpha",
      "train.epochs", "train.batch_size", "train.lr", "train.seed", "train.eval_every", "train.augment",
      "data.root", "data.tile", "data.protocol", "data.fold"};
  for (const auto& [k, v] : kv.entries()) {
    if (!known.count(k)) throw ConfigError("unknown config key '" + k + "'");
  }

  RunConfig c;
  auto& m = c.model;
  if (kv.has("encoder.variant")) m.encoder = EncoderConfig::preset(kv.get_string("encoder.variant"));
  if (kv.has("encoder.dims")) m.encoder.dims = get_int4(kv, "encoder.dims");
  if (kv.has("encoder.depths")) m.encoder.depths = get_int4(kv, "encoder.depths");
  if (kv.has("encoder.heads")) m.encoder.heads = get_int4(kv, "encoder.heads");
  if (kv.has("encoder.mlp_ratio")) m.encoder.mlp_ratio = kv.get_double("encoder.mlp_ratio");
  if (kv.has("decoder.channels")) m.decoder.channels = static_cast<int>(kv.get_int("decoder.channels"));
  if (kv.has("decoder.topdown")) m.decoder.topdown = kv.get_bool("decoder.topdown");
  if (kv.has("decoder.norm_groups")) m.decoder.norm_groups = static_cast<int>(kv.get_int("decoder.norm_groups"));
  if (kv.has("feedback.mode")) m.feedback.mode = parse_feedback_mode(kv.get_string("feedback.mode"));
  if (kv.has("feedback.beta_init")) m.feedback.beta_init = kv.get_double("feedback.beta_init");
  if (kv.has("feedback.attn_downsample")) {
    m.feedback.attn_downsample = static_cast<int>(kv.get_int("feedback.attn_downsample"));
  }
  if (kv.has("feedback.train_both_rounds")) {
    m.feedback.train_both_rounds = kv.get_bool("feedback.train_both_rounds");
  }
  if (kv.has("model.num_classes")) m.num_classes = static_cast<int>(kv.get_int("model.num_classes"));
  if (kv.has("model.dtype")) m.dtype = parse_dtype(kv.get_string("model.dtype"));
  if (kv.has("model.seed")) m.init_seed = static_cast<std::uint64_t>(kv.get_int("model.seed"));

  if (kv.has("loss.lambda1")) c.loss.lambda1 = kv.get_double("loss.lambda1");
  if (kv.has("loss.lambda2")) c.loss.lambda2 = kv.get_double("loss.lambda2");
  if (kv.has("loss.lambda3")) c.loss.lambda3 = kv.get_double("loss.lambda3");
  if (kv.has("loss.alpha")) c.loss.alpha = kv.get_double("loss.alpha");

  if (kv.has("train.epochs")) c.train.epochs = static_cast<int>(kv.get_int("train.epochs"));
  if (kv.has("train.batch_size")) c.train.batch_size = static_cast<int>(kv.get_int("train.batch_size"));
  if (kv.has("train.lr")) c.train.lr0 = kv.get_double("train.lr");
  if (kv.has("train.seed")) c.train.seed = static_cast<std::uint64_t>(kv.get_int("train.seed"));
  if (kv.has("train.eval_every")) c.train.eval_every = static_cast<int>(kv.get_int("train.eval_every"));
  if (kv.has("train.augment")) c.train.augment = kv.get_bool("train.augment");

  if (kv.has("data.root")) c.data.root = kv.get_string("data.root");
  if (kv.has("data.tile")) c.data.tile = static_cast<int>(kv.get_int("data.tile"));
  if (kv.has("data.protocol")) c.data.protocol = kv.get_string("data.protocol");
  if (kv.has("data.fold")) c.data.fold = static_cast<int>(kv.get_int("data.fold"));

  m.validate();
  c.loss.validate();
  c.train.validate();
  return c;
}

RunConfig load_run_config(const std::string& path) { return run_config_from(KeyValueConfig::load(path)); }

std::string canonical_text(const ModelConfig& m) {
  std::ostringstream os;
  os << "decoder.channels = " << m.decoder.channels << "\n"
     << "decoder.norm_groups = " << m.decoder.norm_groups << "\n"
     << "decoder.topdown = " << (m.decoder.topdown ? "true" : "false") << "\n"
     << "encoder.depths = " << fmt_array(m.encoder.depths) << "\n"
     << "encoder.dims = " << fmt_array(m.encoder.dims) << "\n"
     << "encoder.heads = " << fmt_array(m.encoder.heads) << "\n"
     << "encoder.mlp_ratio = " << fmt_double(m.encoder.mlp_ratio) << "\n"
     << "encoder.variant = \"" << m.encoder.variant << "\"\n"
     << "feedback.attn_downsample = " << m.feedback.attn_downsample << "\n"
     << "feedback.beta_init = " << fmt_double(m.feedback.beta_init) << "\n"
     << "feedback.mode = \"" << to_string(m.feedback.mode) << "\"\n"
     << "feedback.train_both_rounds = " << (m.feedback.train_both_rounds ? "true" : "false") << "\n"
     << "model.dtype = \"" << to_string(m.dtype) << "\"\n"
     << "model.num_classes = " << m.num_classes << "\n"
     << "model.seed = " << m.init_seed << "\n";
  return os.str();
}

std::string canonical_text(const RunConfig& c) {
  std::ostringstream os;
  os << "data.fold = " << c.data.fold << "\n"
     << "data.protocol = \"" << c.data.protocol << "\"\n"
     << "data.root = \"" << c.data.root << "\"\n"
     << "data.tile = " << c.data.tile << "\n"
     << canonical_text(c.model)
     << "loss.alpha = " << fmt_double(c.loss.alpha) << "\n"
     << "loss.lambda1 = " << fmt_double(c.loss.lambda1) << "\n"
     << "loss.lambda2 = " << fmt_double(c.loss.lambda2) << "\n"
     << "loss.lambda3 = " << fmt_double(c.loss.lambda3) << "\n"
     << "train.augment = " << (c.train.augment ? "true" : "false") << "\n"
     << "train.batch_size = " << c.train.batch_size << "\n"
     << "train.epochs = " << c.train.epochs << "\n"
     << "train.eval_every = " << c.train.eval_every << "\n"
     << "train.lr = " << fmt_double(c.train.lr0) << "\n"
     << "train.seed = " << c.train.seed << "\n";
  return os.str();
}

std::uint64_t config_digest(const RunConfig& cfg) { return fnv1a64(canonical_text(cfg)); }

std::string hex64(std::uint64_t value) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(value));
  return buf;
}

}  // namespace fbf
