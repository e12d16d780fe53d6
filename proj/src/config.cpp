#include "pstp/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "pstp/errors.hpp"

namespace pstp {

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError(msg);
}

// Pulls a field if present, enforcing that no unknown keys exist.
template <typename T>
void get_field(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) {
    try {
      out = j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("field '") + key + "': " + e.what());
    }
  }
}

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known,
                    const char* where) {
  if (!j.is_object()) throw ConfigError(std::string(where) + ": expected a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key()))
      throw ConfigError(std::string(where) + ": unknown field '" + it.key() + "'");
}

}  // namespace

void ModelConfig::validate() const {
  require(K >= 1, "model.K must be >= 1");
  require(T >= 1, "model.T must be >= 1");
  require(M >= 1, "model.M must be >= 1");
  require(D >= 1, "model.D must be >= 1");
  require(D_a >= 1, "model.D_a must be >= 1");
  require(C >= 2, "model.C must be >= 2");
  require(top_k >= 1 && top_k <= K,
          "model.top_k must satisfy 1 <= top_k <= K (top_k=" + std::to_string(top_k) +
              ", K=" + std::to_string(K) + ")");
  require(top_m >= 1 && top_m <= M,
          "model.top_m must satisfy 1 <= top_m <= M (top_m=" + std::to_string(top_m) +
              ", M=" + std::to_string(M) + ")");
  require(heads >= 1, "model.heads must be >= 1");
  require(D % heads == 0, "model.D (" + std::to_string(D) + ") must be divisible by model.heads (" +
                              std::to_string(heads) + ")");
  require(fusion_layers >= 1, "model.fusion_layers must be >= 1");
}

void TrainConfig::validate() const {
  // lr == 0 is allowed: it runs the optimizer without moving parameters,
  // which is useful as a control experiment.
  require(lr >= 0, "train.lr must be >= 0");
  require(lr_decay_factor > 0 && lr_decay_factor <= 1,
          "train.lr_decay_factor must be in (0, 1]");
  require(lr_decay_epochs >= 1, "train.lr_decay_epochs must be >= 1");
  require(batch_size >= 1, "train.batch_size must be >= 1");
  require(epochs >= 0, "train.epochs must be >= 0");
  require(precision == "f32" || precision == "f64",
          "train.precision must be \"f32\" or \"f64\", got \"" + precision + "\"");
}

void SynthSpec::validate() const {
  require(n_videos >= 1, "synth.n_videos must be >= 1");
  require(signal_strength >= 0, "synth.signal_strength must be >= 0");
  require(noise_std >= 0, "synth.noise_std must be >= 0");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"K", c.K},
                     {"T", c.T},
                     {"M", c.M},
                     {"D", c.D},
                     {"D_a", c.D_a},
                     {"top_k", c.top_k},
                     {"top_m", c.top_m},
                     {"heads", c.heads},
                     {"fusion_layers", c.fusion_layers},
                     {"C", c.C},
                     {"use_srsm", c.use_srsm},
                     {"use_avam", c.use_avam},
                     {"use_lgpm", c.use_lgpm}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  reject_unknown(j,
                 {"K", "T", "M", "D", "D_a", "top_k", "top_m", "heads", "fusion_layers", "C",
                  "use_srsm", "use_avam", "use_lgpm"},
                 "model config");
  get_field(j, "K", c.K);
  get_field(j, "T", c.T);
  get_field(j, "M", c.M);
  get_field(j, "D", c.D);
  get_field(j, "D_a", c.D_a);
  get_field(j, "top_k", c.top_k);
  get_field(j, "top_m", c.top_m);
  get_field(j, "heads", c.heads);
  get_field(j, "fusion_layers", c.fusion_layers);
  get_field(j, "C", c.C);
  get_field(j, "use_srsm", c.use_srsm);
  get_field(j, "use_avam", c.use_avam);
  get_field(j, "use_lgpm", c.use_lgpm);
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"lr", c.lr},
                     {"lr_decay_factor", c.lr_decay_factor},
                     {"lr_decay_epochs", c.lr_decay_epochs},
                     {"batch_size", c.batch_size},
                     {"epochs", c.epochs},
                     {"seed", c.seed},
                     {"precision", c.precision}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  reject_unknown(
      j, {"lr", "lr_decay_factor", "lr_decay_epochs", "batch_size", "epochs", "seed", "precision"},
      "train config");
  get_field(j, "lr", c.lr);
  get_field(j, "lr_decay_factor", c.lr_decay_factor);
  get_field(j, "lr_decay_epochs", c.lr_decay_epochs);
  get_field(j, "batch_size", c.batch_size);
  get_field(j, "epochs", c.epochs);
  get_field(j, "seed", c.seed);
  get_field(j, "precision", c.precision);
}

void to_json(nlohmann::json& j, const SynthSpec& c) {
  j = nlohmann::json{{"n_videos", c.n_videos},
                     {"signal_strength", c.signal_strength},
                     {"noise_std", c.noise_std},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, SynthSpec& c) {
  reject_unknown(j, {"n_videos", "signal_strength", "noise_std", "seed"}, "synth spec");
  get_field(j, "n_videos", c.n_videos);
  get_field(j, "signal_strength", c.signal_strength);
  get_field(j, "noise_std", c.noise_std);
  get_field(j, "seed", c.seed);
}

nlohmann::json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string text = ss.str();
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    // e.byte is a 1-based offset into the text; turn it into line/column.
    std::size_t line = 1, col = 1;
    for (std::size_t i = 0; i + 1 < e.byte && i < text.size(); ++i) {
      if (text[i] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
    }
    throw ConfigError(path + ":" + std::to_string(line) + ":" + std::to_string(col) +
                      ": " + e.what());
  }
}

void save_json_file(const std::string& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write file: " + path);
  out << j.dump(2) << '\n';
}

}  // namespace pstp
