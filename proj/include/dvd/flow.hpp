#pragma once

// Coarse optical-flow providers for adjacent frame pairs.

#include "dvd/types.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace dvd {

enum class FlowKind { Truth, Blockmatch, File };
FlowKind flow_kind_from_string(const std::string& name);
std::string to_string(FlowKind kind);

struct BlockMatchOptions {
  Index block = 8;
  Index radius = 8;
  /// Box-filter radius, in blocks, applied to the block displacement field.
  Index smooth = 1;
};

/// Integer displacement v per block of `from` minimising the grey-level SAD
/// against `to` at p + v; ties prefer the smaller |v|. Returns [2,H,W].
Tensor blockmatch_flow(const Tensor& from, const Tensor& to, const BlockMatchOptions& options = {});

/// forward = blockmatch(prev → cur), backward = blockmatch(cur → prev).
FlowPair blockmatch_pair(const Tensor& prev, const Tensor& cur, const BlockMatchOptions& options = {});

/// One FlowPair per adjacent pair (t−1, t), t = 1..N−1.
std::vector<FlowPair> blockmatch_sequence(const FrameSequence& frames, const BlockMatchOptions& options = {});

/// fw_00001.dvdt / bw_00001.dvdt, ... in `dir`; entry t relates frames t−1 and t.
void write_flows(const std::vector<FlowPair>& flows, const std::filesystem::path& dir);
/// A missing backward file falls back to the negated forward flow.
std::vector<FlowPair> read_flows(const std::filesystem::path& dir, Index pairs);

/// Mean endpoint error between two [2,H,W] fields.
double endpoint_error(const Tensor& a, const Tensor& b);

/// Bilinear resize of a [2,H,W] field to [2,h,w] with displacements rescaled.
Tensor resize_flow(const Tensor& flow, Index h, Index w);

}  // namespace dvd
