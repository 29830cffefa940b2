#include "aspectrec/training.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace aspectrec {

namespace {

std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r");
  std::size_t e = s.find_last_not_of(" \t\r");
  return b == std::string::npos ? "" : s.substr(b, e - b + 1);
}

struct KeyHandler {
  std::function<void(TrainConfig&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" +
                    v + "'");
}

template <class T>
T parse_num(const std::string& v, const std::string& key) {
  try {
    std::size_t pos = 0;
    if constexpr (std::is_same_v<T, double>) {
      const double d = std::stod(v, &pos);
      if (pos != v.size()) throw std::invalid_argument(v);
      return d;
    } else if constexpr (std::is_same_v<T, std::uint64_t>) {
      const auto u = std::stoull(v, &pos);
      if (pos != v.size()) throw std::invalid_argument(v);
      return static_cast<T>(u);
    } else {
      const long long n = std::stoll(v, &pos);
      if (pos != v.size()) throw std::invalid_argument(v);
      return static_cast<T>(n);
    }
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': bad numeric value '" + v +
                      "'");
  }
}

const std::map<std::string, KeyHandler>& key_table() {
  static const std::map<std::string, KeyHandler> table = [] {
    std::map<std::string, KeyHandler> t;
    auto num_d = [&t](const std::string& key, double TrainConfig::* field) {
      t[key] = {[key, field](TrainConfig& c, const std::string& v) {
                  c.*field = parse_num<double>(v, key);
                },
                [field](const TrainConfig& c) { return fmt_double(c.*field); }};
    };
    auto num_sz = [&t](const std::string& key,
                       std::size_t TrainConfig::* field) {
      t[key] = {[key, field](TrainConfig& c, const std::string& v) {
                  c.*field = parse_num<std::size_t>(v, key);
                },
                [field](const TrainConfig& c) {
                  return std::to_string(c.*field);
                }};
    };
    auto num_i = [&t](const std::string& key, int TrainConfig::* field) {
      t[key] = {[key, field](TrainConfig& c, const std::string& v) {
                  c.*field = parse_num<int>(v, key);
                },
                [field](const TrainConfig& c) {
                  return std::to_string(c.*field);
                }};
    };
    auto flag = [&t](const std::string& key, bool TrainConfig::* field) {
      t[key] = {[key, field](TrainConfig& c, const std::string& v) {
                  c.*field = parse_bool(v, key);
                },
                [field](const TrainConfig& c) {
                  return c.*field ? std::string("true") : std::string("false");
                }};
    };
    auto str = [&t](const std::string& key,
                    std::string TrainConfig::* field) {
      t[key] = {[field](TrainConfig& c, const std::string& v) { c.*field = v; },
                [field](const TrainConfig& c) { return c.*field; }};
    };

    num_d("learning_rate", &TrainConfig::learning_rate);
    num_sz("epochs", &TrainConfig::epochs);
    num_sz("batch_size", &TrainConfig::batch_size);
    num_sz("k", &TrainConfig::k);
    t["seed"] = {[](TrainConfig& c, const std::string& v) {
                   c.seed = parse_num<std::uint64_t>(v, "seed");
                 },
                 [](const TrainConfig& c) { return std::to_string(c.seed); }};
    num_sz("patience", &TrainConfig::patience);
    num_d("grad_clip", &TrainConfig::grad_clip);
    num_d("rec_lr_scale", &TrainConfig::rec_lr_scale);
    num_d("rec_grad_clip", &TrainConfig::rec_grad_clip);
    num_d("lr_decay", &TrainConfig::lr_decay);
    flag("no_joint", &TrainConfig::no_joint);
    flag("no_finetune", &TrainConfig::no_finetune);
    flag("no_prompt", &TrainConfig::no_prompt);
    flag("discrete_prompt", &TrainConfig::discrete_prompt);
    flag("no_alternating", &TrainConfig::no_alternating);
    flag("no_attention", &TrainConfig::no_attention);
    flag("user_only_prompt", &TrainConfig::user_only_prompt);
    flag("item_only_prompt", &TrainConfig::item_only_prompt);
    str("softmax_axis", &TrainConfig::softmax_axis);
    flag("teacher_forcing", &TrainConfig::teacher_forcing);
    flag("ft_trainable_in_phase1", &TrainConfig::ft_trainable_in_phase1);
    str("aspect_pooling", &TrainConfig::aspect_pooling);
    num_i("d_model", &TrainConfig::d_model);
    num_i("n_layers", &TrainConfig::n_layers);
    num_i("n_heads", &TrainConfig::n_heads);
    num_i("max_len", &TrainConfig::max_len);
    num_i("d_u", &TrainConfig::d_u);
    num_i("d_i", &TrainConfig::d_i);
    num_i("d_a", &TrainConfig::d_a);
    num_i("rec_hidden", &TrainConfig::rec_hidden);
    num_d("lm_init_std", &TrainConfig::lm_init_std);
    num_sz("min_freq", &TrainConfig::min_freq);
    num_sz("pretrain_epochs", &TrainConfig::pretrain_epochs);
    num_d("pretrain_lr", &TrainConfig::pretrain_lr);
    num_sz("finetune_epochs", &TrainConfig::finetune_epochs);
    num_d("finetune_lr", &TrainConfig::finetune_lr);
    num_d("train_ratio", &TrainConfig::train_ratio);
    num_d("val_ratio", &TrainConfig::val_ratio);
    num_d("test_ratio", &TrainConfig::test_ratio);
    return t;
  }();
  return table;
}

}  // namespace

TrainConfig parse_train_config(const std::string& text) {
  TrainConfig cfg;
  std::istringstream is(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const std::size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(line_no) +
                        ": expected key = value");
    const std::string key = trim(t.substr(0, eq));
    const std::string value = trim(t.substr(eq + 1));
    const auto it = key_table().find(key);
    if (it == key_table().end())
      throw ConfigError("config line " + std::to_string(line_no) +
                        ": unknown key '" + key + "'");
    it->second.set(cfg, value);
  }
  return cfg;
}

TrainConfig load_train_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_train_config(ss.str());
}

std::string serialize_train_config(const TrainConfig& cfg) {
  std::ostringstream os;
  for (const auto& [key, handler] : key_table())
    os << key << " = " << handler.get(cfg) << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------

namespace {

void csv_cell(std::ostringstream& os, double v) {
  if (std::isnan(v)) return;  // empty cell
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  os << buf;
}

bool field_equal(double a, double b) {
  if (std::isnan(a) && std::isnan(b)) return true;
  return a == b;
}

}  // namespace

std::string history_csv(const TrainHistory& h) {
  std::ostringstream os;
  os << "epoch,extraction_loss,rec_loss,val_extraction_loss,val_rec_loss,"
        "val_f1,val_rmse,wall_seconds\n";
  for (const EpochStats& e : h.entries) {
    os << e.epoch << ',';
    csv_cell(os, e.extraction_loss);
    os << ',';
    csv_cell(os, e.rec_loss);
    os << ',';
    csv_cell(os, e.val_extraction_loss);
    os << ',';
    csv_cell(os, e.val_rec_loss);
    os << ',';
    csv_cell(os, e.val_f1);
    os << ',';
    csv_cell(os, e.val_rmse);
    os << ',';
    csv_cell(os, e.wall_seconds);
    os << '\n';
  }
  return os.str();
}

bool histories_equal_ignoring_wall(const TrainHistory& a,
                                   const TrainHistory& b) {
  if (a.entries.size() != b.entries.size()) return false;
  for (std::size_t i = 0; i < a.entries.size(); ++i) {
    const EpochStats& x = a.entries[i];
    const EpochStats& y = b.entries[i];
    if (x.epoch != y.epoch) return false;
    if (!field_equal(x.extraction_loss, y.extraction_loss)) return false;
    if (!field_equal(x.rec_loss, y.rec_loss)) return false;
    if (!field_equal(x.val_extraction_loss, y.val_extraction_loss))
      return false;
    if (!field_equal(x.val_rec_loss, y.val_rec_loss)) return false;
    if (!field_equal(x.val_f1, y.val_f1)) return false;
    if (!field_equal(x.val_rmse, y.val_rmse)) return false;
  }
  return true;
}

std::string bench_csv(const BenchReport& r) {
  std::ostringstream os;
  os << "records,seconds\n";
  for (const BenchRow& row : r.rows) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%zu,%.4f\n", row.records, row.seconds);
    os << buf;
  }
  char fit[160];
  std::snprintf(fit, sizeof fit,
                "# fit: seconds = %.8g * records + %.6g (R^2 = %.4f)\n",
                r.slope, r.intercept, r.r_squared);
  os << fit;
  return os.str();
}

}  // namespace aspectrec
