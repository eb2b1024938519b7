#include "ma3/config.hpp"

#include <openssl/sha.h>

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

namespace ma3 {

namespace {

std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* expected) {
  throw ConfigError("config: bad value '" + value + "' for key '" + key + "' (expected " + expected + ")", key);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value, const char* expected) {
  T out{};
  const char* end = value.data() + value.size();
  const auto r = std::from_chars(value.data(), end, out);
  if (r.ec != std::errc{} || r.ptr != end) bad_value(key, value, expected);
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true") return true;
  if (v == "0" || v == "false") return false;
  bad_value(key, v, "true or false");
}

struct Field {
  std::string key;
  std::function<std::string(const TrainConfig&)> get;
  std::function<void(TrainConfig&, const std::string&)> set;
};

Field real(std::string key, double TrainConfig::*m) {
  return {key, [m](const TrainConfig& c) { return format_double(c.*m); },
          [m, key](TrainConfig& c, const std::string& v) { c.*m = parse_number<double>(key, v, "a number"); }};
}

Field integer(std::string key, int TrainConfig::*m) {
  return {key, [m](const TrainConfig& c) { return std::to_string(c.*m); },
          [m, key](TrainConfig& c, const std::string& v) { c.*m = parse_number<int>(key, v, "an integer"); }};
}

Field seed(std::string key, std::uint64_t TrainConfig::*m) {
  return {key, [m](const TrainConfig& c) { return std::to_string(c.*m); },
          [m, key](TrainConfig& c, const std::string& v) {
            c.*m = parse_number<std::uint64_t>(key, v, "a non-negative integer");
          }};
}

Field flag(std::string key, bool TrainConfig::*m) {
  return {key, [m](const TrainConfig& c) { return std::string(c.*m ? "true" : "false"); },
          [m, key](TrainConfig& c, const std::string& v) { c.*m = parse_bool(key, v); }};
}

Field text(std::string key, std::string TrainConfig::*m) {
  return {key, [m](const TrainConfig& c) { return c.*m; }, [m](TrainConfig& c, const std::string& v) { c.*m = v; }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back({"mode", [](const TrainConfig& c) { return to_string(c.mode); },
                 [](TrainConfig& c, const std::string& v) { c.mode = parse_mode(v); }});
    f.push_back(real("lambda", &TrainConfig::lambda));
    f.push_back(real("dropout_rate", &TrainConfig::dropout_rate));
    f.push_back(real("theta0", &TrainConfig::theta0));
    f.push_back(real("eps_s", &TrainConfig::eps_s));
    f.push_back(real("translation", &TrainConfig::translation));
    f.push_back({"affine",
                 [](const TrainConfig& c) {
                   return std::string(c.affine == AffineParameterization::Free ? "free" : "similarity");
                 },
                 [](TrainConfig& c, const std::string& v) {
                   if (v == "similarity")
                     c.affine = AffineParameterization::Similarity;
                   else if (v == "free")
                     c.affine = AffineParameterization::Free;
                   else
                     bad_value("affine", v, "similarity or free");
                 }});
    f.push_back(real("lr_cls", &TrainConfig::lr_cls));
    f.push_back(real("lr_adv", &TrainConfig::lr_adv));
    f.push_back(integer("lr_halve_every", &TrainConfig::lr_halve_every));
    f.push_back(integer("episodes", &TrainConfig::episodes));
    f.push_back(integer("eval_every", &TrainConfig::eval_every));
    f.push_back(integer("val_episodes", &TrainConfig::val_episodes));
    f.push_back(integer("test_episodes", &TrainConfig::test_episodes));
    f.push_back(integer("n_way", &TrainConfig::n_way));
    f.push_back(integer("k_shot", &TrainConfig::k_shot));
    f.push_back(integer("q_query", &TrainConfig::q_query));
    f.push_back(seed("seed", &TrainConfig::seed));
    f.push_back({"precision", [](const TrainConfig& c) { return std::string(c.precision == Precision::F64 ? "64" : "32"); },
                 [](TrainConfig& c, const std::string& v) {
                   if (v == "32")
                     c.precision = Precision::F32;
                   else if (v == "64")
                     c.precision = Precision::F64;
                   else
                     bad_value("precision", v, "32 or 64");
                 }});
    f.push_back({"head", [](const TrainConfig& c) { return std::string(c.head == HeadKind::Cosine ? "cosine" : "euclidean"); },
                 [](TrainConfig& c, const std::string& v) {
                   if (v == "euclidean")
                     c.head = HeadKind::Euclidean;
                   else if (v == "cosine")
                     c.head = HeadKind::Cosine;
                   else
                     bad_value("head", v, "euclidean or cosine");
                 }});
    f.push_back(real("temperature", &TrainConfig::temperature));
    f.push_back(integer("blocks", &TrainConfig::blocks));
    f.push_back(integer("filters", &TrainConfig::filters));
    f.push_back(integer("h_dim", &TrainConfig::h_dim));
    f.push_back(flag("batch_norm", &TrainConfig::batch_norm));
    f.push_back(real("bn_momentum", &TrainConfig::bn_momentum));
    f.push_back(integer("adv_blocks", &TrainConfig::adv_blocks));
    f.push_back(integer("adv_filters", &TrainConfig::adv_filters));
    f.push_back(text("dataset", &TrainConfig::dataset));
    f.push_back(text("data_root", &TrainConfig::data_root));
    f.push_back(integer("image_size", &TrainConfig::image_size));
    f.push_back(flag("invert", &TrainConfig::invert));
    f.push_back(flag("rotate_classes", &TrainConfig::rotate_classes));
    f.push_back(integer("train_classes", &TrainConfig::train_classes));
    f.push_back(integer("val_classes", &TrainConfig::val_classes));
    f.push_back(integer("test_classes", &TrainConfig::test_classes));
    f.push_back(integer("images_per_class", &TrainConfig::images_per_class));
    f.push_back(seed("data_seed", &TrainConfig::data_seed));
    f.push_back(flag("freeze_classifier", &TrainConfig::freeze_classifier));
    f.push_back(flag("freeze_adversary", &TrainConfig::freeze_adversary));
    f.push_back(text("run", &TrainConfig::run));
    return f;
  }();
  return table;
}

}  // namespace

void set_config_value(TrainConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& f : fields()) {
    if (f.key == key) {
      f.set(cfg, value);
      return;
    }
  }
  throw ConfigError("config: unknown key '" + key + "'", key);
}

void apply_config_text(TrainConfig& cfg, const std::string& text) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config: line " + std::to_string(lineno) + " is not 'key = value': " + t, t);
    set_config_value(cfg, trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
  }
}

void apply_config_file(TrainConfig& cfg, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("config: cannot read " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  apply_config_text(cfg, ss.str());
}

std::string config_to_text(const TrainConfig& cfg) {
  std::string out;
  for (const auto& f : fields()) out += f.key + " = " + f.get(cfg) + "\n";
  return out;
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& f : fields()) keys.push_back(f.key);
  return keys;
}

std::string git_blob_hash(const std::string& text) {
  const std::string blob = "blob " + std::to_string(text.size()) + std::string(1, '\0') + text;
  unsigned char digest[SHA_DIGEST_LENGTH];
  SHA1(reinterpret_cast<const unsigned char*>(blob.data()), blob.size(), digest);
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned char b : digest) {
    out += hex[b >> 4];
    out += hex[b & 15];
  }
  return out;
}

}  // namespace ma3
