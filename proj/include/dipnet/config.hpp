#pragma once

#include <string>
#include <vector>

#include "dipnet/data.hpp"
#include "dipnet/model.hpp"
#include "dipnet/train.hpp"

namespace dipnet {

// Flat `key = value` run configuration with `#` comments.  Every field has a
// default; unknown keys are rejected outright so a typo cannot silently fall
// back to a default.  Precedence: --set override > DIPNET_SEED env > file >
// default (apply_env before apply_overrides keeps that order).
struct RunConfig {
  TrainConfig train;
  ModelConfig model;
  DatasetSpec data;
  std::string out_dir = "out";

  static RunConfig from_file(const std::string& path);
  static RunConfig from_text(const std::string& text);

  // one key; throws ConfigError for unknown keys or unparseable values
  void set(const std::string& key, const std::string& value);
  // entries of the form key=value, applied in order
  void apply_overrides(const std::vector<std::string>& sets);
  // DIPNET_SEED, when present, replaces the seed key
  void apply_env();

  void validate() const;

  // canonical echo of every key; parses back to an identical config
  std::string resolved() const;
};

}  // namespace dipnet
