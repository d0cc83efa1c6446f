#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace moleclue::mol {

enum class BondType : int { Single = 0, Double = 1, Triple = 2, Aromatic = 3 };
inline constexpr int kBondTypeCount = 4;

const char* bond_type_name(BondType t);
std::optional<BondType> bond_type_from_name(const std::string& name);

struct Bond {
  std::size_t i = 0;
  std::size_t j = 0;
  BondType type = BondType::Single;
};

// Fixed 2-D topology: element codes on nodes, typed undirected bonds.
// The topology is carried unchanged through the whole pipeline.
struct MoleculeGraph {
  std::string id;
  std::vector<int> atom_types;
  std::vector<Bond> bonds;

  std::size_t atom_count() const { return atom_types.size(); }
};

// Per-atom 3-D positions in angstroms, bound to a graph by id.
struct Conformer {
  std::string graph_id;
  std::vector<std::array<double, 3>> positions;

  std::size_t atom_count() const { return positions.size(); }
};

struct NormalizationConstants {
  std::array<double, 3> centroid{0.0, 0.0, 0.0};
  double scale = 1.0;
};

struct LabeledExample {
  MoleculeGraph graph;
  Conformer conformer;
  double label = 0.0;
  std::optional<std::string> split;  // honored by the harness when present
};

// Throws std::invalid_argument naming the violated invariant: bad endpoint,
// self bond, duplicate undirected bond, or disconnected graph.
void validate_graph(const MoleculeGraph& graph);
// Checks row count against the graph and that every coordinate is finite.
void validate_conformer(const MoleculeGraph& graph, const Conformer& conformer);

struct NormalizeResult {
  Conformer conformer;
  NormalizationConstants constants;
  bool degenerate = false;  // all atoms coincident; scale clamped to 1
};

// Centers on the centroid and divides by the RMS atom distance from it.
// A single atom (or a fully coincident conformer) gets scale 1.
NormalizeResult normalize_positions(const Conformer& conformer);
Conformer denormalize_positions(const Conformer& conformer,
                                const NormalizationConstants& constants);

// positions + tau * eps with eps i.i.d. standard normal per coordinate.
// tau = 0 returns the input unchanged; negative tau is rejected.
Conformer contaminate(const Conformer& conformer, double tau,
                      std::uint64_t seed);

// Mean over atoms of the squared Euclidean displacement. No rotational
// alignment is applied; decoded conformers live in the input's frame.
double distance_dx(const Conformer& a, const Conformer& b);
inline double rmsd(const Conformer& a, const Conformer& b) {
  return std::sqrt(distance_dx(a, b));
}

// JSON dataset per docs/dataset_schema.md. Errors name the record index and
// the violated invariant; duplicate ids are rejected.
std::vector<LabeledExample> parse_dataset(const std::string& path);

// Smooth rotation/translation-invariant label used by the synthetic task:
// a sum of Gaussians of all pairwise interatomic distances.
double synthetic_label(const std::vector<std::array<double, 3>>& positions);

// Random chain/branch molecules of 4..16 atoms with plausible bond lengths.
// label_noise adds Gaussian noise to the otherwise deterministic labels.
std::vector<LabeledExample> make_synthetic_dataset(std::size_t n_molecules,
                                                   std::uint64_t seed,
                                                   double label_noise = 0.0);

struct DatasetSplit {
  std::vector<LabeledExample> train;
  std::vector<LabeledExample> test;
};

// Deterministic split. Examples carrying a split field are routed by it;
// the remainder is shuffled by seed and cut at test_fraction.
DatasetSplit split_dataset(const std::vector<LabeledExample>& examples,
                           double test_fraction, std::uint64_t seed);

}  // namespace moleclue::mol
