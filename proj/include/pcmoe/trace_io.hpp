#pragma once

// Routing trace files: one JSON object per line, one line per routing
// decision. Field order is fixed:
//
//   {"step":..,"batch_index":..,"patch_index":..,"expert_ids":[..],
//    "weights":[..],"full_probs":[..],"class_fractions":[..]}
//
// class_fractions (ground-truth class composition of the patch) is optional
// on read and always written when known.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace pcmoe {

struct TraceRecord {
  std::int64_t step = 0;
  int batch_index = 0;
  int patch_index = 0;
  std::vector<int> expert_ids;
  std::vector<double> weights;
  std::vector<double> full_probs;
  std::vector<double> class_fractions;

  bool operator==(const TraceRecord&) const = default;
};

std::string to_json_line(const TraceRecord& record);
TraceRecord parse_trace_line(const std::string& line);

void write_trace(const std::filesystem::path& path, std::span<const TraceRecord> records);
/// Appends to an existing file.
void append_trace(const std::filesystem::path& path, std::span<const TraceRecord> records);
std::vector<TraceRecord> read_trace(const std::filesystem::path& path);

}  // namespace pcmoe
