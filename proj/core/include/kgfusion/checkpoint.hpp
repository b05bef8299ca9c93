#pragma once
// KGP1 checkpoint format: a complete ToyFusionModel (configuration, vocabulary,
// and every trainable tensor, KG encoder included) serialized little-endian.
//
// Layout:
//   magic "KGP1"
//   u32 d, heads, layers, ff, d_img, max_seq; u64 seed
//   u32 vocab_count, then vocab_count length-prefixed words
//   tensors, each as u32 rows, u32 cols, rows*cols f64:
//     embed, pos, w_img,
//     per block: wq wk wv wo ln1_g ln1_b ln2_g ln2_b w1 b1 w2 b2,
//     lnf_g, lnf_b,
//     kg.relations, kg.self_rel, kg.w_node, kg.w_rel, kg.attn, kg.gcn_w
//   f64 kg.leaky_slope
//
// Vectors are stored as 1 x n tensors. The loader validates every shape
// against the configuration and throws FormatError on disagreement, so a
// write -> read -> write cycle is byte-identical.

#include "kgfusion/fusion.hpp"

#include <iosfwd>
#include <string>

namespace kgf {

void save_checkpoint(const ToyFusionModel& model, std::ostream& os);
ToyFusionModel load_checkpoint(std::istream& is);

void save_checkpoint_file(const ToyFusionModel& model, const std::string& path);
ToyFusionModel load_checkpoint_file(const std::string& path);

} // namespace kgf
