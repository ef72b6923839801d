#pragma once

// Sectioned key=value run configuration:
//
//   [train]
//   epochs = 20
//
// Keys are addressed as `section.key`. Every key has a built-in default;
// files and overrides may only set known keys.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "moose/ensemble.hpp"
#include "moose/model.hpp"
#include "moose/synthetic.hpp"
#include "moose/training.hpp"

namespace moose {

class RunConfig {
 public:
  RunConfig();

  void load_file(const std::filesystem::path& path);
  void parse(std::istream& is, const std::string& origin);
  // `section.key=value`
  void apply_override(const std::string& assignment);
  void set(const std::string& key, const std::string& value);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::string& get(const std::string& key) const;
  int get_int(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::uint64_t get_u64(const std::string& key) const;
  std::vector<int> get_ints(const std::string& key) const;
  std::vector<double> get_doubles(const std::string& key) const;

  void write(std::ostream& os) const;

  // Typed views; each validates its values and throws ConfigError.
  SceneConfig scene() const;
  PyramidConfig pyramid(int num_classes) const;
  ProbeConfig probe() const;
  TrainConfig base_train() const;
  TrainConfig probe_train() const;
  EnsembleConfig ensemble() const;
  std::uint64_t seed() const { return get_u64("run.seed"); }

  // Builds every typed view once so malformed values surface early.
  void check() const;

 private:
  TrainConfig train_section(const std::string& section) const;
  std::map<std::string, std::string> values_;
};

}  // namespace moose
