#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "blto/common.hpp"
#include "blto/evaluation.hpp"

namespace blto {

/// One completed victim run as found on disk.
struct RunLedger {
  std::string run_id;
  std::string attack;
  std::string method;
  std::vector<MetricsRecord> records;
};

/// Loads a run directory holding metrics.jsonl and summary.json.
RunLedger load_run(const std::filesystem::path& dir);

/// Run directories under `root` (itself included), sorted by path.
std::vector<std::filesystem::path> find_runs(const std::filesystem::path& root);

struct ReportResult {
  std::vector<std::string> runs;                 // run ids included
  std::vector<std::filesystem::path> missing;    // inputs without any ledger
  std::vector<std::filesystem::path> files;      // files written
};

/// Writes into `out_dir`:
///   curves/<run_id>.csv   per-epoch BA, ASR, S_N, alignment, uniformity
///   summary.csv           attack,method,BA,ASR at the final epoch
///   sn_asr.svg            S_N and ASR against epoch for every run
///   align_uniform.svg     alignment and uniformity against epoch
/// Inputs without ledgers are reported in `missing`. Throws ArgumentError
/// before writing anything when no run is found.
ReportResult write_report(const std::vector<std::filesystem::path>& inputs, const std::filesystem::path& out_dir);

}  // namespace blto
