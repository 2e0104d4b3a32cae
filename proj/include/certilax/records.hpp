#pragma once

#include <json.hpp>
#include <string>

#include "certilax/staircase.hpp"

namespace certilax {

/// Result records are line-delimited JSON, append-only.  Every numeric field
/// is finite or the explicit string sentinel "-inf"; run ids are derived
/// from the configuration so reruns of the same command produce identical
/// records except for the timing fields.
nlohmann::json build_certify_record(
    const std::string& command, const std::string& model_path,
    const std::string& model_digest, const std::string& input_digest,
    const Vector& x_hat, int true_class, int target_class /* -1 = all */,
    double radius, Norm norm, const StaircaseConfig& cfg,
    const CertificateResult& result, double wall_time_s);

/// JSON encoding of a double that keeps infinities printable.
nlohmann::json json_number(double v);

void append_record(const std::string& path, const nlohmann::json& record);

/// Field-by-field equality ignoring timing ("timestamp", "wall_time_s").
bool records_equal_modulo_timing(nlohmann::json a, nlohmann::json b);

}  // namespace certilax
