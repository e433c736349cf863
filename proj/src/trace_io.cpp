#include "pcmoe/trace_io.hpp"

#include <fstream>

#include "json.hpp"
#include "pcmoe/errors.hpp"

namespace pcmoe {

namespace {

void write_lines(std::ofstream& os, const std::filesystem::path& path,
                 std::span<const TraceRecord> records) {
  if (!os) throw DataError("cannot open trace for writing: " + path.string());
  for (const auto& r : records) os << to_json_line(r) << '\n';
  if (!os) throw DataError("failed writing trace: " + path.string());
}

}  // namespace

std::string to_json_line(const TraceRecord& r) {
  nlohmann::ordered_json j;
  j["step"] = r.step;
  j["batch_index"] = r.batch_index;
  j["patch_index"] = r.patch_index;
  j["expert_ids"] = r.expert_ids;
  j["weights"] = r.weights;
  j["full_probs"] = r.full_probs;
  if (!r.class_fractions.empty()) j["class_fractions"] = r.class_fractions;
  return j.dump();
}

TraceRecord parse_trace_line(const std::string& line) {
  try {
    const auto j = nlohmann::json::parse(line);
    TraceRecord r;
    r.step = j.at("step").get<std::int64_t>();
    r.batch_index = j.at("batch_index").get<int>();
    r.patch_index = j.at("patch_index").get<int>();
    r.expert_ids = j.at("expert_ids").get<std::vector<int>>();
    r.weights = j.at("weights").get<std::vector<double>>();
    r.full_probs = j.at("full_probs").get<std::vector<double>>();
    if (j.contains("class_fractions")) r.class_fractions = j["class_fractions"].get<std::vector<double>>();
    if (r.weights.size() != r.expert_ids.size()) throw DataError("weights and expert_ids differ in length");
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed trace record: ") + e.what());
  }
}

void write_trace(const std::filesystem::path& path, std::span<const TraceRecord> records) {
  std::ofstream os(path, std::ios::trunc);
  write_lines(os, path, records);
}

void append_trace(const std::filesystem::path& path, std::span<const TraceRecord> records) {
  std::ofstream os(path, std::ios::app);
  write_lines(os, path, records);
}

std::vector<TraceRecord> read_trace(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open trace: " + path.string());
  std::vector<TraceRecord> out;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty()) out.push_back(parse_trace_line(line));
  }
  return out;
}

}  // namespace pcmoe
