#pragma once

#include "memloom/config.hpp"
#include "memloom/eval.hpp"

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace memloom {

// Run directory layout:
//   data/            stream.jsonl, test_<task>.jsonl, manifest.json
//   checkpoint.json, memory.jsonl, run_manifest.json
//   stages/          per-task snapshots for the forgetting curve
//   metrics.json, metrics.csv, forgetting_curve.csv, neighbor_matrix.csv, timing.json

// Writes the stream, per-task test sets and a data manifest.
void cmd_generate(const RunConfig& cfg, const std::optional<std::filesystem::path>& data_dir = {});

// Trains the configured variant on a generated stream.
void cmd_train(const RunConfig& cfg, const std::optional<std::filesystem::path>& data_dir = {});

// Evaluates saved artifacts and writes the enabled reports.
EvalReport cmd_eval(const RunConfig& cfg, const std::optional<std::filesystem::path>& data_dir = {});

// generate (if needed), train and eval in one go.
EvalReport cmd_run(const RunConfig& cfg);

// Inputs are run directories or config files (which are run first, fanned
// out over thread_budget() workers). Writes comparison.csv into out_dir and
// returns its contents.
std::string cmd_compare(std::span<const std::filesystem::path> inputs, const std::filesystem::path& out_dir);

// MEMLOOM_THREADS when set, otherwise the hardware concurrency (at least 1).
std::size_t thread_budget();

// FNV-1a of a file's bytes, as 16 hex digits.
std::string file_hash(const std::filesystem::path& path);

} // namespace memloom
