#include "dvd/flow.hpp"

#include "dvd/autodiff.hpp"

#include <cmath>
#include <cstdio>
#include <limits>

namespace dvd {

FlowKind flow_kind_from_string(const std::string& name) {
  if (name == "truth") return FlowKind::Truth;
  if (name == "blockmatch") return FlowKind::Blockmatch;
  if (name == "file") return FlowKind::File;
  throw ValidationError("unknown flow provider '" + name + "' (expected truth|blockmatch|file)");
}

std::string to_string(FlowKind kind) {
  switch (kind) {
    case FlowKind::Truth: return "truth";
    case FlowKind::Blockmatch: return "blockmatch";
    case FlowKind::File: return "file";
  }
  return "truth";
}

namespace {

Eigen::MatrixXd grey(const Tensor& frame) {
  require_rank3(frame, "blockmatch frame");
  const Index C = frame.dim(0), H = frame.dim(1), W = frame.dim(2);
  Eigen::MatrixXd g = Eigen::MatrixXd::Zero(H, W);
  for (Index c = 0; c < C; ++c)
    for (Index y = 0; y < H; ++y)
      for (Index x = 0; x < W; ++x) g(y, x) += frame(c, y, x) / static_cast<double>(C);
  return g;
}

}  // namespace

Tensor blockmatch_flow(const Tensor& from, const Tensor& to, const BlockMatchOptions& o) {
  if (from.shape() != to.shape()) {
    throw ValidationError("blockmatch: frame shapes differ " + shape_string(from.shape()) + " vs " +
                          shape_string(to.shape()));
  }
  if (o.block < 1 || o.radius < 0 || o.smooth < 0) throw ValidationError("blockmatch: invalid options");
  const Eigen::MatrixXd a = grey(from), b = grey(to);
  const Index H = a.rows(), W = a.cols();
  const Index by = (H + o.block - 1) / o.block, bx = (W + o.block - 1) / o.block;
  Eigen::MatrixXd u(by, bx), v(by, bx);
  for (Index i = 0; i < by; ++i) {
    for (Index j = 0; j < bx; ++j) {
      const Index y0 = i * o.block, x0 = j * o.block;
      const Index h = std::min(o.block, H - y0), w = std::min(o.block, W - x0);
      double best = std::numeric_limits<double>::infinity();
      Index best_r = std::numeric_limits<Index>::max(), bu = 0, bv = 0;
      for (Index dy = -o.radius; dy <= o.radius; ++dy) {
        if (y0 + dy < 0 || y0 + dy + h > H) continue;
        for (Index dx = -o.radius; dx <= o.radius; ++dx) {
          if (x0 + dx < 0 || x0 + dx + w > W) continue;
          const double sad = (a.block(y0, x0, h, w) - b.block(y0 + dy, x0 + dx, h, w)).cwiseAbs().sum();
          const Index r = dx * dx + dy * dy;
          if (sad < best || (sad == best && r < best_r)) {
            best = sad;
            best_r = r;
            bu = dx;
            bv = dy;
          }
        }
      }
      u(i, j) = static_cast<double>(bu);
      v(i, j) = static_cast<double>(bv);
    }
  }
  auto smooth = [&](const Eigen::MatrixXd& m) {
    Eigen::MatrixXd s(m.rows(), m.cols());
    for (Index i = 0; i < m.rows(); ++i)
      for (Index j = 0; j < m.cols(); ++j) {
        const Index i0 = std::max<Index>(0, i - o.smooth), i1 = std::min(m.rows() - 1, i + o.smooth);
        const Index j0 = std::max<Index>(0, j - o.smooth), j1 = std::min(m.cols() - 1, j + o.smooth);
        s(i, j) = m.block(i0, j0, i1 - i0 + 1, j1 - j0 + 1).mean();
      }
    return s;
  };
  if (o.smooth > 0) {
    u = smooth(u);
    v = smooth(v);
  }
  Tensor flow({2, H, W});
  for (Index y = 0; y < H; ++y)
    for (Index x = 0; x < W; ++x) {
      flow(0, y, x) = u(y / o.block, x / o.block);
      flow(1, y, x) = v(y / o.block, x / o.block);
    }
  return flow;
}

FlowPair blockmatch_pair(const Tensor& prev, const Tensor& cur, const BlockMatchOptions& options) {
  return FlowPair{blockmatch_flow(prev, cur, options), blockmatch_flow(cur, prev, options)};
}

std::vector<FlowPair> blockmatch_sequence(const FrameSequence& frames, const BlockMatchOptions& options) {
  std::vector<FlowPair> out;
  for (Index t = 1; t < frames.size(); ++t) out.push_back(blockmatch_pair(frames[t - 1], frames[t], options));
  return out;
}

namespace {

std::string flow_file(const char* prefix, Index t) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s_%05lld.dvdt", prefix, static_cast<long long>(t));
  return buf;
}

}  // namespace

void write_flows(const std::vector<FlowPair>& flows, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw ValidationError("cannot create flow directory " + dir.string() + ": " + ec.message());
  for (std::size_t i = 0; i < flows.size(); ++i) {
    const auto t = static_cast<Index>(i + 1);
    save_tensor(flows[i].forward, dir / flow_file("fw", t));
    save_tensor(flows[i].backward, dir / flow_file("bw", t));
  }
}

std::vector<FlowPair> read_flows(const std::filesystem::path& dir, Index pairs) {
  std::vector<FlowPair> out;
  for (Index t = 1; t <= pairs; ++t) {
    FlowPair fp;
    fp.forward = load_tensor(dir / flow_file("fw", t));
    if (fp.forward.rank() != 3 || fp.forward.dim(0) != 2) {
      throw ValidationError("flow file " + flow_file("fw", t) + " must be [2,H,W], got " + shape_string(fp.forward.shape()));
    }
    const auto bw = dir / flow_file("bw", t);
    fp.backward = std::filesystem::exists(bw) ? load_tensor(bw) : Tensor(fp.forward.shape(), (-fp.forward.data()).eval());
    if (fp.backward.shape() != fp.forward.shape()) throw ValidationError("flow file " + bw.string() + " shape mismatch");
    out.push_back(std::move(fp));
  }
  return out;
}

double endpoint_error(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape() || a.rank() != 3 || a.dim(0) != 2) throw ValidationError("endpoint_error: shape mismatch");
  const Index P = a.dim(1) * a.dim(2);
  const Eigen::ArrayXd du = a.data().head(P) - b.data().head(P), dv = a.data().tail(P) - b.data().tail(P);
  return (du.square() + dv.square()).sqrt().mean();
}

Tensor resize_flow(const Tensor& flow, Index h, Index w) {
  if (flow.rank() != 3 || flow.dim(0) != 2) throw ValidationError("resize_flow expects [2,H,W]");
  const Index H = flow.dim(1), W = flow.dim(2);
  if (H == h && W == w) return flow;
  Tensor out = kernels::bilinear_sample(flow, resize_coords(H, W, h, w), Padding::Border);
  const Index P = h * w;
  out.data().head(P) *= static_cast<double>(w) / static_cast<double>(W);
  out.data().tail(P) *= static_cast<double>(h) / static_cast<double>(H);
  return out;
}

}  // namespace dvd
