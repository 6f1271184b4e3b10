// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <string>

#include "dropin/param_store.hpp"

namespace dropin {

/// On-disk container: every named tensor (name, shape, row-major doubles),
/// the trainable set, and an opaque text blob for the architecture and
/// neuron ledger.
///
/// Layout (little-endian):
///   magic "DPCK" | u32 version | u64 n_tensors
///   per tensor: u64 name_len | name | u8 trainable | u64 rank | u64 dims[rank] | f64 values[]
///   u64 meta_len | meta
struct Checkpoint {
  ParamStore params;
  std::string meta;
};

/// Writes to a sibling temporary and renames it over `path`, so a reader
/// never observes a half-written file.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// create_directories that reports failure as Error(kIo).
void ensure_directory(const std::filesystem::path& dir);

/// Atomic text write (temp file + rename).
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);

}  // namespace dropin
