#pragma once

#include "safecast/numeric/tape.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace safecast {

/// On-disk layout:
///
///   SAFECAST-CHECKPOINT 1
///   meta <key> <value>          (zero or more)
///   tensor <name> <rows> <cols> (one per tensor, in payload order)
///   payload
///   <raw little-endian float64 values, each tensor row-major>
struct Checkpoint {
  std::map<std::string, std::string> meta;
  std::vector<std::pair<std::string, Matrix>> tensors;

  const Matrix *find(const std::string &name) const;
};

void save_checkpoint(const std::filesystem::path &path, const Checkpoint &ckpt);
Checkpoint load_checkpoint(const std::filesystem::path &path);

/// Copies tensors into matching parameters; every parameter must be
/// present with the same shape.
void restore_parameters(const Checkpoint &ckpt, const std::vector<Parameter *> &params);
void append_parameters(Checkpoint &ckpt, const std::vector<Parameter *> &params);

}  // namespace safecast
