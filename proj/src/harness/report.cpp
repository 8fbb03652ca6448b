#include "sage/harness/report.hpp"

#include <cmath>
#include <map>

#include <json.hpp>

#include "sage/error.hpp"
#include "sage/json_ids.hpp"

namespace sage {

using nlohmann::json;

namespace {

std::string value_str(double v) { return std::isnan(v) ? "nan" : format_double(v); }

double value_from(const json& j) {
  const auto s = j.get<std::string>();
  return s == "nan" ? std::numeric_limits<double>::quiet_NaN() : parse_double(s);
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out.push_back('"');
    out.push_back(c);
  }
  return out + "\"";
}

}  // namespace

std::vector<ReportRow> report_rows(std::span<const CrossSectionGroup> groups, std::span<const Test1Score> test1,
                                   std::span<const EditOutcome> test2) {
  std::vector<ReportRow> rows;
  for (const auto& g : groups) {
    const std::string id = g.id(), attr = g.attribute, sign = to_string(g.sign);
    rows.push_back({id, attr, sign, "filter", "max_effect", "", value_str(g.max_effect)});
    rows.push_back({id, attr, sign, "filter", "selected_subset_size", "", std::to_string(g.selected_subset_size)});
    rows.push_back({id, attr, sign, "filter", "upstream_nodes", "", std::to_string(g.upstream_nodes().size())});
    for (const auto& s : test1) {
      if (s.group != id) continue;
      rows.push_back({id, attr, sign, s.method, "sufficiency", "", value_str(s.sufficiency)});
      rows.push_back({id, attr, sign, s.method, "necessity", "", value_str(s.necessity)});
      rows.push_back({id, attr, sign, s.method, "l_clean", "", value_str(s.l_clean)});
      rows.push_back({id, attr, sign, s.method, "l_sufficiency", "", value_str(s.l_sufficiency)});
      rows.push_back({id, attr, sign, s.method, "l_necessity", "", value_str(s.l_necessity)});
      rows.push_back({id, attr, sign, s.method, "l_mean", "", value_str(s.l_mean)});
    }
    for (const auto& o : test2) {
      if (o.group != id) continue;
      rows.push_back({id, attr, sign, o.method + "/" + o.mode, "success_rate", std::to_string(o.k),
                      value_str(o.success_rate)});
    }
  }
  return rows;
}

std::string report_csv(std::span<const ReportRow> rows) {
  std::string out = std::string(kReportHeader) + "\n";
  for (const auto& r : rows) {
    for (const auto* f : {&r.group, &r.attribute, &r.sign, &r.method, &r.metric, &r.budget}) out += csv_field(*f) + ",";
    out += csv_field(r.value) + "\n";
  }
  return out;
}

std::string test1_to_json(std::span<const Test1Score> scores) {
  json arr = json::array();
  for (const auto& s : scores)
    arr.push_back({{"group", s.group},
                   {"method", s.method},
                   {"sufficiency", value_str(s.sufficiency)},
                   {"necessity", value_str(s.necessity)},
                   {"l_clean", value_str(s.l_clean)},
                   {"l_sufficiency", value_str(s.l_sufficiency)},
                   {"l_necessity", value_str(s.l_necessity)},
                   {"l_mean", value_str(s.l_mean)},
                   {"degenerate", s.degenerate}});
  return arr.dump(1);
}

std::vector<Test1Score> test1_from_json(const std::string& text) {
  std::vector<Test1Score> out;
  for (const auto& j : json::parse(text)) {
    Test1Score s;
    s.group = j.at("group");
    s.method = j.at("method");
    s.sufficiency = value_from(j.at("sufficiency"));
    s.necessity = value_from(j.at("necessity"));
    s.l_clean = value_from(j.at("l_clean"));
    s.l_sufficiency = value_from(j.at("l_sufficiency"));
    s.l_necessity = value_from(j.at("l_necessity"));
    s.l_mean = value_from(j.at("l_mean"));
    s.degenerate = j.at("degenerate");
    out.push_back(std::move(s));
  }
  return out;
}

std::string test2_to_json(std::span<const EditOutcome> outcomes) {
  json arr = json::array();
  for (const auto& o : outcomes) {
    json recs = json::array();
    std::map<Token, std::size_t> failures;  // predicted token histogram of failed edits
    for (const auto& r : o.records) {
      recs.push_back({{"pair", r.pair_index},
                      {"from", r.from},
                      {"to", r.to},
                      {"predicted_edit", r.predicted_edit},
                      {"predicted_truth", r.predicted_truth}});
      if (r.predicted_edit != r.predicted_truth) ++failures[r.predicted_edit];
    }
    json hist = json::object();
    for (auto [t, n] : failures) hist[std::to_string(t)] = n;
    arr.push_back({{"group", o.group},
                   {"method", o.method},
                   {"mode", o.mode},
                   {"k", o.k},
                   {"success_rate", value_str(o.success_rate)},
                   {"failure_predictions", hist},
                   {"records", recs}});
  }
  return arr.dump(1);
}

std::vector<EditOutcome> test2_from_json(const std::string& text) {
  std::vector<EditOutcome> out;
  for (const auto& j : json::parse(text)) {
    EditOutcome o;
    o.group = j.at("group");
    o.method = j.at("method");
    o.mode = j.at("mode");
    o.k = j.at("k");
    o.success_rate = value_from(j.at("success_rate"));
    for (const auto& r : j.at("records"))
      o.records.push_back({r.at("pair").get<std::size_t>(), r.at("from"), r.at("to"), r.at("predicted_edit"),
                           r.at("predicted_truth")});
    out.push_back(std::move(o));
  }
  return out;
}

}  // namespace sage
