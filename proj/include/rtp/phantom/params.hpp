#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace rtp {

/// Row order is fixed: five PTV rings, then the four OARs.
enum class Structure { Ring1, Ring2, Ring3, Ring4, Ring5, Bladder, ST, FHL, FHR };
enum class Function { MaxDose, MaxDVH };

inline constexpr std::size_t kNumRings = 5;
inline constexpr std::size_t kNumOars = 4;
inline constexpr std::size_t kNumParamRows = kNumRings + kNumOars;

inline constexpr std::array<Structure, kNumParamRows> kAllStructures{
    Structure::Ring1, Structure::Ring2,   Structure::Ring3, Structure::Ring4, Structure::Ring5,
    Structure::Bladder, Structure::ST, Structure::FHL,   Structure::FHR};

std::string_view structure_name(Structure s);
Structure parse_structure(std::string_view name);
std::string_view function_name(Function f);
Function parse_function(std::string_view name);
inline bool is_ring(Structure s) { return static_cast<int>(s) < static_cast<int>(kNumRings); }

class ParamError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ParamRow {
  Structure structure = Structure::Ring1;
  Function function = Function::MaxDose;
  double weight = 0.0;
  std::optional<double> volume;  // absent for rings
  double dose = 0.0;

  bool operator==(const ParamRow&) const = default;
};

struct ParamTable {
  std::vector<ParamRow> rows;

  /// Throws ParamError if rows are out of order, a ring carries a volume,
  /// an OAR lacks one, or a value falls outside its range.
  void validate() const;
  const ParamRow& at(Structure s) const;

  bool operator==(const ParamTable&) const = default;
};

/// Header `structure,function,weight_pct,volume_pct,dose_gy`. Dose is
/// printed with two decimals; weight and volume use the shortest exact form.
std::string params_to_csv(const ParamTable& table);
ParamTable parse_params_csv(const std::string& text, const std::string& source = "params.csv");

void write_params_csv(const std::filesystem::path& path, const ParamTable& table);
ParamTable read_params_csv(const std::filesystem::path& path);

/// Rounds to two decimals, the precision stored in params.csv.
double round_dose(double gy);

}  // namespace rtp
