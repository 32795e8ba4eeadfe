#pragma once

#include <string>

#include <json.hpp>

#include "ghostv2/analysis.hpp"
#include "ghostv2/train.hpp"

// Text and JSON renderings of the library reports, shared by the CLI commands.
namespace ghostv2::cli {

using nlohmann::json;

json to_json(const Shape& s);
json to_json(const ModelSummary& s);
json to_json(const FlopsReport& r, bool rows);
json to_json(const AttentionCostTable& t);
json to_json(const RfMask& m);
json to_json(const BenchReport& r);
json to_json(const GradCheckReport& r);
json to_json(const TrainLog& log, bool steps);

std::string text(const ModelSummary& s);
std::string text(const FlopsReport& r, bool rows);
std::string text(const AttentionCostTable& t);
std::string text(const BenchReport& r);
std::string text(const GradCheckReport& r);
std::string text(const TrainLog& log, int log_every);

std::string millions(std::uint64_t v);

}  // namespace ghostv2::cli
