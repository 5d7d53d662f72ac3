#include "rtp/phantom/params.hpp"

#include "rtp/util/files.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace rtp {

namespace {

constexpr std::array<std::string_view, kNumParamRows> kNames{"Ring1",   "Ring2", "Ring3", "Ring4", "Ring5",
                                                              "Bladder", "ST",    "FHL",   "FHR"};

std::string shortest(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

double parse_number(std::string_view s, const std::string& where) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw ParamError(where + ": cannot parse number '" + std::string(s) + "'");
  }
  return v;
}

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= line.size(); ++i) {
    if (i == line.size() || line[i] == ',') {
      out.push_back(line.substr(start, i - start));
      start = i + 1;
    }
  }
  return out;
}

}  // namespace

std::string_view structure_name(Structure s) { return kNames[static_cast<std::size_t>(s)]; }

Structure parse_structure(std::string_view name) {
  for (std::size_t i = 0; i < kNames.size(); ++i) {
    if (kNames[i] == name) return kAllStructures[i];
  }
  throw ParamError("unknown structure '" + std::string(name) + "'");
}

std::string_view function_name(Function f) { return f == Function::MaxDose ? "MaxDose" : "MaxDVH"; }

Function parse_function(std::string_view name) {
  if (name == "MaxDose") return Function::MaxDose;
  if (name == "MaxDVH") return Function::MaxDVH;
  throw ParamError("unknown function type '" + std::string(name) + "'");
}

double round_dose(double gy) { return std::round(gy * 100.0) / 100.0; }

void ParamTable::validate() const {
  if (rows.size() != kNumParamRows) {
    throw ParamError("parameter table has " + std::to_string(rows.size()) + " rows, expected 9");
  }
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    const std::string name(structure_name(r.structure));
    if (r.structure != kAllStructures[i]) throw ParamError("row " + std::to_string(i) + " should be " +
                                                           std::string(structure_name(kAllStructures[i])));
    if (is_ring(r.structure)) {
      if (r.function != Function::MaxDose) throw ParamError(name + ": rings use MaxDose");
      if (r.volume) throw ParamError(name + ": rings have no volume");
    } else {
      if (r.function != Function::MaxDVH) throw ParamError(name + ": OARs use MaxDVH");
      if (!r.volume) throw ParamError(name + ": OAR row needs a volume");
      if (!(*r.volume > 0.0 && *r.volume <= 100.0)) throw ParamError(name + ": volume outside (0,100]");
    }
    if (!(r.weight > 0.0 && r.weight <= 100.0)) throw ParamError(name + ": weight outside (0,100]");
    if (!(r.dose > 0.0)) throw ParamError(name + ": dose must be positive");
  }
}

const ParamRow& ParamTable::at(Structure s) const {
  for (const auto& r : rows) {
    if (r.structure == s) return r;
  }
  throw ParamError("table has no row for " + std::string(structure_name(s)));
}

std::string params_to_csv(const ParamTable& table) {
  std::ostringstream os;
  os << "structure,function,weight_pct,volume_pct,dose_gy\n";
  for (const auto& r : table.rows) {
    char dose[64];
    std::snprintf(dose, sizeof dose, "%.2f", r.dose);
    os << structure_name(r.structure) << ',' << function_name(r.function) << ',' << shortest(r.weight) << ','
       << (r.volume ? shortest(*r.volume) : std::string()) << ',' << dose << '\n';
  }
  return os.str();
}

ParamTable parse_params_csv(const std::string& text, const std::string& source) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line != "structure,function,weight_pct,volume_pct,dose_gy") {
    throw ParamError(source + ": missing or unexpected header");
  }
  ParamTable table;
  int lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::string where = source + ":" + std::to_string(lineno);
    const auto f = split_fields(line);
    if (f.size() != 5) throw ParamError(where + ": expected 5 fields, got " + std::to_string(f.size()));
    ParamRow row;
    row.structure = parse_structure(f[0]);
    row.function = parse_function(f[1]);
    row.weight = parse_number(f[2], where);
    if (!f[3].empty() && f[3] != "-") row.volume = parse_number(f[3], where);
    row.dose = parse_number(f[4], where);
    table.rows.push_back(row);
  }
  return table;
}

void write_params_csv(const std::filesystem::path& path, const ParamTable& table) {
  write_file_atomic(path, params_to_csv(table));
}

ParamTable read_params_csv(const std::filesystem::path& path) {
  return parse_params_csv(read_file(path), path.string());
}

}  // namespace rtp
