#pragma once

#include <string>

#include "odeid/indist.hpp"

namespace odeid {

extern const char* kToolVersion;

std::string analysis_report_json(const GeneralModel& gm, const IdentifiabilityResult& res,
                                 std::uint64_t seed, bool compact);

std::string trace_jsonl(const std::vector<TraceRecord>& trace);

std::string certification_json(const TrajectoryBundle& bundle, const CertifyReport& rep,
                               std::uint64_t seed, bool compact);

std::string recovery_json(const RecoveryReport& rep, bool compact);

std::string error_json(const std::string& type, const std::string& message);

// CSV emission: one file per moved quantity and per output, columns
// t, baseline, then one column per tau.
void write_bundle_csv(const TrajectoryBundle& bundle, const std::string& out_dir);

}  // namespace odeid
