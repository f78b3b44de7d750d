#pragma once

// Per-element basis layouts and their instantiation over a molecule: block
// dimensions, the (atom, shell, m) <-> global index bijection, and the
// symmetric matrices addressed through it.

#include <json.hpp>
#include <map>
#include <memory>
#include <sstream>

#include "deqh/core.hpp"
#include "deqh/gto.hpp"

namespace deqh::data {

struct Shell {
  int n;
  int l;
  double gamma;
};

inline const std::map<int, std::string>& element_names() {
  static const std::map<int, std::string> names = {{1, "H"}, {6, "C"}, {7, "N"}, {8, "O"}};
  return names;
}

class BasisLayout {
public:
  BasisLayout() = default;
  explicit BasisLayout(std::map<int, std::vector<Shell>> shells) : shells_(std::move(shells)) {
    for (const auto& [z, sh] : shells_) {
      require(!sh.empty(), "BasisLayout: element with empty shell list");
      for (const auto& s : sh) {
        require(s.l >= 0 && s.l <= 8, "BasisLayout: unsupported degree");
        require(s.gamma > 0.0, "BasisLayout: non-positive exponent");
      }
    }
  }

  bool supports(int z) const { return shells_.count(z) > 0; }

  const std::vector<Shell>& shells(int z) const {
    auto it = shells_.find(z);
    require(it != shells_.end(), "BasisLayout: unsupported element Z=" + std::to_string(z));
    return it->second;
  }

  std::vector<int> elements() const {
    std::vector<int> zs;
    for (const auto& [z, _] : shells_) zs.push_back(z);
    return zs;
  }

  int dim(int z) const {
    int d = 0;
    for (const auto& s : shells(z)) d += 2 * s.l + 1;
    return d;
  }

  std::vector<gto::GtoShell> gto_shells(int z) const {
    std::vector<gto::GtoShell> out;
    for (const auto& s : shells(z)) out.push_back(gto::make_shell(s.n, s.l, s.gamma));
    return out;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    for (const auto& [z, sh] : shells_) {
      nlohmann::json arr = nlohmann::json::array();
      for (const auto& s : sh) arr.push_back({{"n", s.n}, {"l", s.l}, {"gamma", s.gamma}});
      j[std::to_string(z)] = arr;
    }
    return j;
  }

  static BasisLayout from_json(const nlohmann::json& j) {
    std::map<int, std::vector<Shell>> shells;
    for (auto it = j.begin(); it != j.end(); ++it) {
      int z = std::stoi(it.key());
      std::vector<Shell> sh;
      for (const auto& s : it.value())
        sh.push_back({s.at("n").get<int>(), s.at("l").get<int>(), s.at("gamma").get<double>()});
      shells[z] = std::move(sh);
    }
    return BasisLayout(std::move(shells));
  }

  std::string digest() const { return fnv1a_hex(to_json().dump()); }

private:
  std::map<int, std::vector<Shell>> shells_;  // ordered by Z; shell order defines row order
};

/// Placeholder single-primitive layout defining the block structure:
/// H -> 1s, 2s, 1p (dim 5); C, N, O -> 1s, 2s, 3s, 1p, 2p, 1d (dim 14).
inline const BasisLayout& default_layout() {
  static const BasisLayout layout = [] {
    std::vector<Shell> h = {{1, 0, 1.3}, {2, 0, 0.3}, {1, 1, 0.8}};
    std::vector<Shell> heavy = {{1, 0, 80.0}, {2, 0, 10.0}, {3, 0, 1.0},
                                {1, 1, 2.0},  {2, 1, 0.5},  {1, 2, 0.8}};
    return BasisLayout({{1, h}, {6, heavy}, {7, heavy}, {8, heavy}});
  }();
  return layout;
}

/// A BasisLayout instantiated over a concrete atom list: offsets, the global
/// index map, and per-orbital metadata.
struct MoleculeLayout {
  struct Orbital {
    int atom;
    int shell;  // index into the element's shell list
    int l;
    int m;  // -l..l
  };

  IVec z;
  std::vector<int> atom_offset;  // per atom, into matrix rows
  std::vector<int> atom_dim;
  std::vector<Orbital> orbitals;
  int total_dim = 0;
  const BasisLayout* layout = nullptr;

  static MoleculeLayout build(const IVec& z, const BasisLayout& layout) {
    MoleculeLayout ml;
    ml.z = z;
    ml.layout = &layout;
    for (Eigen::Index a = 0; a < z.size(); ++a) {
      require(layout.supports(z[a]),
              "MoleculeLayout: unsupported element Z=" + std::to_string(z[a]));
      ml.atom_offset.push_back(ml.total_dim);
      int d = layout.dim(z[a]);
      ml.atom_dim.push_back(d);
      const auto& shells = layout.shells(z[a]);
      for (int s = 0; s < static_cast<int>(shells.size()); ++s)
        for (int m = -shells[s].l; m <= shells[s].l; ++m)
          ml.orbitals.push_back({static_cast<int>(a), s, shells[s].l, m});
      ml.total_dim += d;
    }
    return ml;
  }

  int n_atoms() const { return static_cast<int>(atom_offset.size()); }

  int global_index(int atom, int shell, int m) const {
    const auto& shells = layout->shells(z[atom]);
    int off = atom_offset[atom];
    for (int s = 0; s < shell; ++s) off += 2 * shells[s].l + 1;
    return off + m + shells[shell].l;
  }
};

/// Block-diagonal Wigner D over every shell of the molecule: the matrix
/// conjugating H and S under a rigid rotation of the geometry.
inline Mat basis_rotation_matrix(const MoleculeLayout& ml, const so3::Rotation& rot) {
  Mat d = Mat::Zero(ml.total_dim, ml.total_dim);
  int off = 0;
  for (int a = 0; a < ml.n_atoms(); ++a)
    for (const auto& s : ml.layout->shells(ml.z[a])) {
      int w = 2 * s.l + 1;
      d.block(off, off, w, w) = so3::wigner_d(s.l, rot);
      off += w;
    }
  return d;
}

/// Symmetric matrix over atomic-orbital indices with per-atom-pair block
/// access; houses H and S.
struct AtomBlockMatrix {
  Mat m;

  static AtomBlockMatrix identity(const MoleculeLayout& ml) {
    return {Mat::Identity(ml.total_dim, ml.total_dim)};
  }

  Eigen::Block<Mat> block(const MoleculeLayout& ml, int a, int b) {
    return m.block(ml.atom_offset[a], ml.atom_offset[b], ml.atom_dim[a], ml.atom_dim[b]);
  }
  Eigen::Block<const Mat> block(const MoleculeLayout& ml, int a, int b) const {
    return m.block(ml.atom_offset[a], ml.atom_offset[b], ml.atom_dim[a], ml.atom_dim[b]);
  }
};

}  // namespace deqh::data
