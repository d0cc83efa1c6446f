#include "moleclue/molgraph.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <stdexcept>

#include <json.hpp>

#include "moleclue/rng.hpp"

namespace moleclue::mol {

const char* bond_type_name(BondType t) {
  switch (t) {
    case BondType::Single: return "single";
    case BondType::Double: return "double";
    case BondType::Triple: return "triple";
    case BondType::Aromatic: return "aromatic";
  }
  return "?";
}

std::optional<BondType> bond_type_from_name(const std::string& name) {
  for (int k = 0; k < kBondTypeCount; ++k) {
    auto t = static_cast<BondType>(k);
    if (name == bond_type_name(t)) return t;
  }
  return std::nullopt;
}

void validate_graph(const MoleculeGraph& graph) {
  const std::size_t n = graph.atom_count();
  if (n == 0) throw std::invalid_argument("graph '" + graph.id + "': no atoms");
  std::set<std::pair<std::size_t, std::size_t>> seen;
  std::vector<std::vector<std::size_t>> adj(n);
  for (const Bond& b : graph.bonds) {
    if (b.i >= n || b.j >= n)
      throw std::invalid_argument("graph '" + graph.id +
                                  "': bond endpoint out of range");
    if (b.i == b.j)
      throw std::invalid_argument("graph '" + graph.id + "': self bond");
    auto key = std::minmax(b.i, b.j);
    if (!seen.insert(key).second)
      throw std::invalid_argument("graph '" + graph.id +
                                  "': duplicate bond " + std::to_string(key.first) +
                                  "-" + std::to_string(key.second));
    adj[b.i].push_back(b.j);
    adj[b.j].push_back(b.i);
  }
  // connectivity by BFS
  std::vector<char> visited(n, 0);
  std::vector<std::size_t> queue{0};
  visited[0] = 1;
  std::size_t reached = 1;
  while (!queue.empty()) {
    std::size_t u = queue.back();
    queue.pop_back();
    for (std::size_t v : adj[u])
      if (!visited[v]) {
        visited[v] = 1;
        ++reached;
        queue.push_back(v);
      }
  }
  if (reached != n)
    throw std::invalid_argument("graph '" + graph.id + "': disconnected graph");
}

void validate_conformer(const MoleculeGraph& graph, const Conformer& conformer) {
  if (conformer.atom_count() != graph.atom_count())
    throw std::invalid_argument(
        "conformer '" + conformer.graph_id + "': position count " +
        std::to_string(conformer.atom_count()) + " does not match atom count " +
        std::to_string(graph.atom_count()));
  for (const auto& p : conformer.positions)
    for (double c : p)
      if (!std::isfinite(c))
        throw std::invalid_argument("conformer '" + conformer.graph_id +
                                    "': non-finite coordinate");
}

NormalizeResult normalize_positions(const Conformer& conformer) {
  const std::size_t n = conformer.atom_count();
  if (n == 0)
    throw std::invalid_argument("normalize_positions: empty conformer");
  NormalizeResult result;
  result.conformer.graph_id = conformer.graph_id;
  result.conformer.positions.resize(n);

  std::array<double, 3> centroid{0, 0, 0};
  for (const auto& p : conformer.positions)
    for (int k = 0; k < 3; ++k) centroid[k] += p[k];
  for (int k = 0; k < 3; ++k) centroid[k] /= static_cast<double>(n);

  double ms = 0.0;
  for (const auto& p : conformer.positions) {
    for (int k = 0; k < 3; ++k) {
      double d = p[k] - centroid[k];
      ms += d * d;
    }
  }
  double scale = std::sqrt(ms / static_cast<double>(n));
  bool degenerate = !(scale > 1e-9);
  if (degenerate) scale = 1.0;

  for (std::size_t i = 0; i < n; ++i)
    for (int k = 0; k < 3; ++k)
      result.conformer.positions[i][k] =
          (conformer.positions[i][k] - centroid[k]) / scale;
  result.constants = {centroid, scale};
  result.degenerate = degenerate;
  return result;
}

Conformer denormalize_positions(const Conformer& conformer,
                                const NormalizationConstants& constants) {
  Conformer out = conformer;
  for (auto& p : out.positions)
    for (int k = 0; k < 3; ++k)
      p[k] = p[k] * constants.scale + constants.centroid[k];
  return out;
}

Conformer contaminate(const Conformer& conformer, double tau,
                      std::uint64_t seed) {
  if (tau < 0.0)
    throw std::invalid_argument("contaminate: negative tau " +
                                std::to_string(tau));
  if (tau == 0.0) return conformer;
  Conformer out = conformer;
  RandomStream rng(seed);
  for (auto& p : out.positions)
    for (int k = 0; k < 3; ++k) p[k] += tau * rng.normal();
  return out;
}

double distance_dx(const Conformer& a, const Conformer& b) {
  if (a.graph_id != b.graph_id || a.atom_count() != b.atom_count())
    throw std::invalid_argument("distance_dx: conformers refer to different graphs ('" +
                                a.graph_id + "' n=" + std::to_string(a.atom_count()) +
                                " vs '" + b.graph_id + "' n=" +
                                std::to_string(b.atom_count()) + ")");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.atom_count(); ++i) {
    double sq = 0.0;
    for (int k = 0; k < 3; ++k) {
      double d = a.positions[i][k] - b.positions[i][k];
      sq += d * d;
    }
    acc += sq;
  }
  return acc / static_cast<double>(a.atom_count());
}

// --- dataset file -------------------------------------------------------------

std::vector<LabeledExample> parse_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("parse_dataset: cannot open '" + path + "'");
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("parse_dataset: '" + path + "' is not valid JSON: " +
                             e.what());
  }
  if (!doc.is_array())
    throw std::runtime_error("parse_dataset: top level must be a list of records");

  std::vector<LabeledExample> out;
  std::set<std::string> ids;
  for (std::size_t r = 0; r < doc.size(); ++r) {
    auto fail = [&](const std::string& what) -> void {
      throw std::runtime_error("parse_dataset: record " + std::to_string(r) +
                               ": " + what);
    };
    const auto& rec = doc[r];
    try {
      LabeledExample ex;
      ex.graph.id = rec.at("id").get<std::string>();
      if (!ids.insert(ex.graph.id).second) fail("duplicate id '" + ex.graph.id + "'");
      ex.graph.atom_types = rec.at("atoms").get<std::vector<int>>();
      for (const auto& bj : rec.at("bonds")) {
        if (!bj.is_array() || bj.size() != 3) fail("bond must be [i, j, type]");
        Bond b;
        b.i = bj[0].get<std::size_t>();
        b.j = bj[1].get<std::size_t>();
        auto t = bond_type_from_name(bj[2].get<std::string>());
        if (!t) fail("unknown bond type '" + bj[2].get<std::string>() + "'");
        b.type = *t;
        ex.graph.bonds.push_back(b);
      }
      ex.conformer.graph_id = ex.graph.id;
      for (const auto& pj : rec.at("positions")) {
        if (!pj.is_array() || pj.size() != 3) fail("position must be [x, y, z]");
        ex.conformer.positions.push_back(
            {pj[0].get<double>(), pj[1].get<double>(), pj[2].get<double>()});
      }
      ex.label = rec.at("label").get<double>();
      if (!std::isfinite(ex.label)) fail("non-finite label");
      if (rec.contains("split")) ex.split = rec.at("split").get<std::string>();

      validate_graph(ex.graph);
      validate_conformer(ex.graph, ex.conformer);
      out.push_back(std::move(ex));
    } catch (const nlohmann::json::exception& e) {
      fail(std::string("malformed field: ") + e.what());
    } catch (const std::invalid_argument& e) {
      fail(e.what());
    }
  }
  return out;
}

// --- synthetic task -----------------------------------------------------------

double synthetic_label(const std::vector<std::array<double, 3>>& positions) {
  // Two Gaussian shells; depends on interatomic distances only, so the label
  // is invariant under rigid motion of the conformer.
  double acc = 0.0;
  for (std::size_t i = 0; i < positions.size(); ++i)
    for (std::size_t j = i + 1; j < positions.size(); ++j) {
      double sq = 0.0;
      for (int k = 0; k < 3; ++k) {
        double d = positions[i][k] - positions[j][k];
        sq += d * d;
      }
      double r = std::sqrt(sq);
      double a = r - 1.6;
      double b = r - 3.2;
      acc += std::exp(-a * a / 0.72) + 0.6 * std::exp(-b * b / 2.88);
    }
  return acc;
}

std::vector<LabeledExample> make_synthetic_dataset(std::size_t n_molecules,
                                                   std::uint64_t seed,
                                                   double label_noise) {
  if (n_molecules < 1)
    throw std::invalid_argument("make_synthetic_dataset: n_molecules must be >= 1");
  std::vector<LabeledExample> out;
  out.reserve(n_molecules);
  for (std::size_t m = 0; m < n_molecules; ++m) {
    RandomStream rng(derive_seed(seed, 0x6d6f6cULL, m));
    LabeledExample ex;
    char idbuf[32];
    std::snprintf(idbuf, sizeof(idbuf), "synth-%05zu", m);
    ex.graph.id = idbuf;
    ex.conformer.graph_id = ex.graph.id;

    std::size_t n_atoms = rng.integer(4, 16);
    std::size_t n_elems = rng.integer(2, 4);
    ex.graph.atom_types.resize(n_atoms);
    for (auto& t : ex.graph.atom_types)
      t = static_cast<int>(rng.integer(0, n_elems - 1));

    ex.conformer.positions.resize(n_atoms);
    ex.conformer.positions[0] = {0, 0, 0};
    for (std::size_t a = 1; a < n_atoms; ++a) {
      // grow a random tree: attach to an earlier atom at bond length
      // 1.0..1.8 A in a jittered direction, retrying clashes a few times
      std::size_t parent = rng.integer(0, a - 1);
      std::array<double, 3> pos{};
      for (int attempt = 0; attempt < 8; ++attempt) {
        double len = rng.uniform(1.0, 1.8);
        std::array<double, 3> dir{rng.normal(), rng.normal(), rng.normal()};
        double norm = std::sqrt(dir[0] * dir[0] + dir[1] * dir[1] +
                                dir[2] * dir[2]) + 1e-12;
        for (int k = 0; k < 3; ++k)
          pos[k] = ex.conformer.positions[parent][k] + len * dir[k] / norm;
        double closest = 1e9;
        for (std::size_t b = 0; b < a; ++b) {
          double sq = 0.0;
          for (int k = 0; k < 3; ++k) {
            double d = pos[k] - ex.conformer.positions[b][k];
            sq += d * d;
          }
          closest = std::min(closest, sq);
        }
        if (closest > 0.64) break;  // > 0.8 A from every placed atom
      }
      ex.conformer.positions[a] = pos;
      BondType type = BondType::Single;
      double roll = rng.uniform(0.0, 1.0);
      if (roll > 0.7) type = BondType::Double;
      if (roll > 0.85) type = BondType::Triple;
      if (roll > 0.93) type = BondType::Aromatic;
      ex.graph.bonds.push_back({parent, a, type});
    }

    ex.label = synthetic_label(ex.conformer.positions);
    if (label_noise > 0.0) ex.label += label_noise * rng.normal();
    out.push_back(std::move(ex));
  }
  return out;
}

DatasetSplit split_dataset(const std::vector<LabeledExample>& examples,
                           double test_fraction, std::uint64_t seed) {
  if (test_fraction < 0.0 || test_fraction > 1.0)
    throw std::invalid_argument("split_dataset: test_fraction out of [0,1]");
  DatasetSplit split;
  std::vector<std::size_t> undecided;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto& ex = examples[i];
    if (ex.split == "train")
      split.train.push_back(ex);
    else if (ex.split == "test")
      split.test.push_back(ex);
    else
      undecided.push_back(i);
  }
  RandomStream rng(derive_seed(seed, 0x73706c6974ULL));
  std::shuffle(undecided.begin(), undecided.end(), rng.engine());
  std::size_t n_test = static_cast<std::size_t>(
      std::llround(test_fraction * static_cast<double>(undecided.size())));
  std::sort(undecided.begin(), undecided.begin() + n_test);
  std::sort(undecided.begin() + n_test, undecided.end());
  for (std::size_t k = 0; k < undecided.size(); ++k)
    (k < n_test ? split.test : split.train).push_back(examples[undecided[k]]);
  return split;
}

}  // namespace moleclue::mol
