#pragma once

#include <span>
#include <string>
#include <vector>

#include "sage/attribution.hpp"
#include "sage/evaluation.hpp"

namespace sage {

struct ReportRow {
  std::string group, attribute, sign, method, metric, budget, value;
};

inline constexpr const char* kReportHeader = "group,attribute,sign,method,metric,budget,value";

// Rows for the filter outcome, Test 1 and Test 2 of every listed group.
std::vector<ReportRow> report_rows(std::span<const CrossSectionGroup> groups, std::span<const Test1Score> test1,
                                   std::span<const EditOutcome> test2);
std::string report_csv(std::span<const ReportRow> rows);

std::string test1_to_json(std::span<const Test1Score> scores);
std::vector<Test1Score> test1_from_json(const std::string& text);
// Outcomes with per-example records.
std::string test2_to_json(std::span<const EditOutcome> outcomes);
std::vector<EditOutcome> test2_from_json(const std::string& text);

}  // namespace sage
