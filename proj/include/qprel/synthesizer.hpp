#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "qprel/annotator.hpp"
#include "qprel/corpus.hpp"

namespace qprel {

enum class ErrorKind : std::uint8_t {
  BrandSwap,
  ModelEdit,
  AudienceFlip,
  SpecChange,
  EssentialDrop,
  NonEssentialDrop,
  CategorySwap,
};

std::string_view error_kind_name(ErrorKind k);
ErrorKind error_kind_from_name(std::string_view s);

struct ErrorType {
  ErrorKind kind{ErrorKind::BrandSwap};
  Label target{Label::Irrelevant};
  bool operator==(const ErrorType&) const = default;
};

/// Every compatible (kind, target) combination, in profile order.
///
///   BrandSwap, ModelEdit, EssentialDrop, CategorySwap -> Irrelevant
///   NonEssentialDrop                                  -> Relevant
///   AudienceFlip, SpecChange                          -> either
inline constexpr std::size_t kNumErrorTypes = 9;
inline constexpr std::array<ErrorType, kNumErrorTypes> kErrorTypes{{
    {ErrorKind::BrandSwap, Label::Irrelevant},
    {ErrorKind::ModelEdit, Label::Irrelevant},
    {ErrorKind::AudienceFlip, Label::Relevant},
    {ErrorKind::AudienceFlip, Label::Irrelevant},
    {ErrorKind::SpecChange, Label::Relevant},
    {ErrorKind::SpecChange, Label::Irrelevant},
    {ErrorKind::EssentialDrop, Label::Irrelevant},
    {ErrorKind::NonEssentialDrop, Label::Relevant},
    {ErrorKind::CategorySwap, Label::Irrelevant},
}};

bool is_compatible(ErrorType t);
std::size_t error_type_index(ErrorType t);
/// "BrandSwap/Irrelevant" form.
std::string error_type_name(ErrorType t);
ErrorType error_type_from_name(std::string_view s);

struct ErrorProfile {
  std::array<double, kNumErrorTypes> weights{};  // indexed like kErrorTypes
  std::size_t attributed = 0;    // errors mapped to a type
  std::size_t unattributed = 0;  // errors no type explains
  bool uniform_fallback = false;

  static ErrorProfile uniform();
  double weight(ErrorType t) const { return weights[error_type_index(t)]; }
};

struct SynthPair {
  LabeledPair pair;
  ErrorType type;
  bool operator==(const SynthPair&) const = default;
};

/// Product ids of synthesized pairs are offset by this base.
inline constexpr int kSynthProductIdBase = 10'000'000;

/// Mutates the product's structured attributes along `etype` and re-renders
/// its title. Returns nullopt when nothing applicable can be mutated or the
/// mutated pair's oracle label differs from the target.
std::optional<LabeledPair> perturb(const World& world, const LabeledPair& pair, ErrorType etype,
                                   std::uint64_t seed);

/// The error type that explains a misclassification of `pair` under the
/// oracle, if any. `predicted` is the wrong prediction.
std::optional<ErrorType> attribute_error(const World& world, const LabeledPair& pair,
                                         Label predicted);

/// Normalized counts of attributed student errors; uniform when none.
ErrorProfile mine_error_types(const World& world, const Judge& student,
                              std::span<const LabeledPair> eval_pairs);

struct SynthResult {
  std::vector<SynthPair> pairs;
  std::size_t requested = 0;
  std::size_t rejected = 0;  // slots that exhausted every retry
  std::array<std::size_t, kNumErrorTypes> type_counts{};
};

/// Up to `n` candidates; slot i draws its type from the profile and retries
/// on seed pairs the type applies to until a perturbation is accepted. A type
/// that applies to no seed pair rejects every slot that draws it.
SynthResult synthesize(const World& world, std::span<const LabeledPair> seed_pairs,
                       const ErrorProfile& profile, std::size_t n, std::uint64_t seed);

inline constexpr int kSynthRetries = 8;

/// Candidates the student misclassifies against their constructed label.
std::vector<SynthPair> select_confusing(const Judge& student, std::span<const SynthPair> candidates);

/// Candidates whose annotator verdict equals the constructed label.
std::vector<SynthPair> filter_candidates(const Judge& annotator,
                                         std::span<const SynthPair> candidates);

struct DsIterationSummary {
  int iteration = 0;
  std::size_t generated = 0;
  std::size_t rejected = 0;
  std::size_t selected = 0;
  std::size_t filtered = 0;  // survivors of the annotator filter
  bool operator==(const DsIterationSummary&) const = default;
};

}  // namespace qprel
