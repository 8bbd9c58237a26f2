#pragma once

#include <array>
#include <string>

#include "magnet/tensor.hpp"

namespace magnet {

// Sensor sources, in the fixed canonical order used everywhere.
enum class Modality { Act = 0, Acw = 1, Dc = 2, Pm = 3 };

inline constexpr std::array<Modality, 4> kAllModalities = {Modality::Act, Modality::Acw,
                                                           Modality::Dc, Modality::Pm};

inline const char* modality_name(Modality m) {
  switch (m) {
    case Modality::Act: return "act";
    case Modality::Acw: return "acw";
    case Modality::Dc: return "dc";
    case Modality::Pm: return "pm";
  }
  return "?";
}

inline Modality modality_from_name(const std::string& name) {
  for (Modality m : kAllModalities) {
    if (name == modality_name(m)) return m;
  }
  throw Error("unknown modality '" + name + "' (expected act, acw, dc or pm)");
}

// Values per sample row: 3-axis accelerometers, flattened depth/pressure grids.
inline int64_t modality_arity(Modality m) {
  switch (m) {
    case Modality::Act:
    case Modality::Acw: return 3;
    case Modality::Dc: return 12 * 16;
    case Modality::Pm: return 32 * 16;
  }
  return 0;
}

inline std::pair<int64_t, int64_t> modality_grid(Modality m) {
  switch (m) {
    case Modality::Dc: return {12, 16};
    case Modality::Pm: return {32, 16};
    default: throw Error("modality has no spatial grid");
  }
}

// One multimodal training batch; only the tensors for selected modalities
// are defined. Accelerometers are [B,T,3], frames are [B,T,H,W].
struct ModalityBatch {
  Tensor act, acw, dc, pm;
  std::vector<int64_t> labels;

  Tensor& of(Modality m) {
    switch (m) {
      case Modality::Act: return act;
      case Modality::Acw: return acw;
      case Modality::Dc: return dc;
      case Modality::Pm: return pm;
    }
    throw Error("bad modality");
  }
  const Tensor& of(Modality m) const { return const_cast<ModalityBatch*>(this)->of(m); }
};

}  // namespace magnet
