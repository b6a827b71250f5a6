#include "reltopo/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <random>

#include "reltopo/attention.hpp"
#include "reltopo/error.hpp"
#include "reltopo/model.hpp"
#include "reltopo/parameters.hpp"
#include "reltopo/topology.hpp"
#include "reltopo/training.hpp"

namespace reltopo::gradcheck {

double max_relative_error(const LossFn& loss, std::vector<Tensor> leaves, double step) {
  const Tensor value = loss(leaves);
  const auto analytic = backward_leaves(value, leaves);
  double worst = 0.0;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto data = leaves[li].mutable_data();
    for (std::size_t k = 0; k < data.size(); ++k) {
      const double orig = data[k];
      data[k] = orig + step;
      const double up = loss(leaves).item();
      data[k] = orig - step;
      const double down = loss(leaves).item();
      data[k] = orig;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic[li][k];
      const double denom = std::max({std::fabs(a), std::fabs(numeric), kFloor});
      worst = std::max(worst, std::fabs(a - numeric) / denom);
    }
  }
  return worst;
}

namespace {

using Rng = std::mt19937_64;

struct Case {
  LossFn loss;
  std::vector<Tensor> leaves;
};
using Builder = std::function<Case(Rng&)>;

Tensor uniform(Shape shape, Rng& rng, double lo, double hi, bool leaf = true) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = u(rng);
  return Tensor(std::move(shape), std::move(v), leaf);
}

// Magnitudes in [lo, hi] with random sign: keeps kinks at zero out of reach.
Tensor away_from_zero(Shape shape, Rng& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::bernoulli_distribution sign(0.5);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = sign(rng) ? u(rng) : -u(rng);
  return Tensor(std::move(shape), std::move(v), true);
}

// Fractional cell coordinates away from integer boundaries.
Tensor cell_coords(Shape shape, Rng& rng, double hi) {
  std::uniform_int_distribution<int> cell(0, static_cast<int>(hi) - 1);
  std::uniform_real_distribution<double> frac(0.1, 0.9);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = cell(rng) + frac(rng);
  return Tensor(std::move(shape), std::move(v), true);
}

// Scalar probe: sum(out * W) with a fixed random W, so every output entry counts.
LossFn probed(std::function<Tensor(const std::vector<Tensor>&)> f, Rng& rng) {
  auto w = std::make_shared<Tensor>();
  auto seed = rng();
  return [f = std::move(f), w, seed](const std::vector<Tensor>& l) {
    const Tensor out = f(l);
    if (w->numel() != out.numel()) {
      Rng r(seed);
      *w = uniform(out.shape(), r, -1.0, 1.0, false);
    }
    return sum(mul(out, *w));
  };
}

Case unary(Rng& rng, Tensor (*op)(const Tensor&), double lo, double hi, bool signed_input) {
  Tensor x = signed_input ? away_from_zero({3, 4}, rng, lo, hi) : uniform({3, 4}, rng, lo, hi);
  return {probed([op](const std::vector<Tensor>& l) { return op(l[0]); }, rng), {x}};
}

Case binary(Rng& rng, Tensor (*op)(const Tensor&, const Tensor&), Shape sa, Shape sb) {
  Tensor a = uniform(sa, rng, -2, 2), b = away_from_zero(sb, rng, 0.5, 2);
  return {probed([op](const std::vector<Tensor>& l) { return op(l[0], l[1]); }, rng), {a, b}};
}

geom::CameraModel small_camera() {
  geom::CameraModel cam;
  cam.intrinsics << 100, 0, 80, 0, 100, 40, 0, 0, 1;
  cam.rotation << 0, -1, 0, 0, 0, -1, 1, 0, 0;
  cam.translation << 0, 1.6, 0;
  cam.width = 160;
  cam.height = 80;
  return cam;
}

// Curves ahead of the small camera, roughly along +x.
Tensor curves_ahead(std::size_t n, Rng& rng) {
  std::uniform_real_distribution<double> ux(8.0, 20.0), uy(-3.0, 3.0), uz(-0.3, 0.3), jit(-0.7, 0.7);
  std::vector<double> v;
  for (std::size_t i = 0; i < n; ++i) {
    const double x0 = ux(rng), y0 = uy(rng);
    for (int r = 0; r < 4; ++r) v.insert(v.end(), {x0 + 4.0 * r + jit(rng), y0 + jit(rng), uz(rng)});
  }
  return Tensor({n, 4, 3}, v, true);
}

std::vector<Tensor> with(std::vector<Tensor> a, const std::vector<Tensor>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

std::vector<std::pair<std::string, Builder>> registry() {
  std::vector<std::pair<std::string, Builder>> r;
  auto add = [&](std::string name, Builder b) { r.emplace_back(std::move(name), std::move(b)); };

  // ---- primitives ----
  add("add", [](Rng& g) { return binary(g, &reltopo::add, {3, 4}, {4}); });
  add("sub", [](Rng& g) { return binary(g, &reltopo::sub, {2, 3, 4}, {3, 1}); });
  add("mul", [](Rng& g) { return binary(g, &reltopo::mul, {3, 4}, {3, 4}); });
  add("div", [](Rng& g) { return binary(g, &reltopo::div, {3, 4}, {1, 4}); });
  add("add_scalar", [](Rng& g) {
    return Case{probed([](const std::vector<Tensor>& l) { return add_scalar(l[0], 0.7); }, g), {uniform({5}, g, -1, 1)}};
  });
  add("scale", [](Rng& g) {
    return Case{probed([](const std::vector<Tensor>& l) { return scale(l[0], -1.3); }, g), {uniform({5}, g, -1, 1)}};
  });
  add("neg", [](Rng& g) { return unary(g, &reltopo::neg, -2, 2, false); });
  add("broadcast_to", [](Rng& g) {
    return Case{probed([](const std::vector<Tensor>& l) { return broadcast_to(l[0], {2, 3, 4}); }, g),
                {uniform({3, 1}, g, -1, 1)}};
  });
  add("relu", [](Rng& g) { return unary(g, &reltopo::relu, 0.1, 2, true); });
  add("sigmoid", [](Rng& g) { return unary(g, &reltopo::sigmoid, -4, 4, false); });
  add("log_sigmoid", [](Rng& g) { return unary(g, &reltopo::log_sigmoid, -6, 6, false); });
  add("exp", [](Rng& g) { return unary(g, &reltopo::exp, -2, 2, false); });
  add("log", [](Rng& g) { return unary(g, &reltopo::log, 0.2, 3, false); });
  add("sqrt", [](Rng& g) { return unary(g, &reltopo::sqrt, 0.2, 3, false); });
  add("sin", [](Rng& g) { return unary(g, &reltopo::sin, -3, 3, false); });
  add("cos", [](Rng& g) { return unary(g, &reltopo::cos, -3, 3, false); });
  add("abs", [](Rng& g) { return unary(g, &reltopo::abs, 0.1, 2, true); });
  add("pow", [](Rng& g) {
    return Case{probed([](const std::vector<Tensor>& l) { return pow(l[0], 2.5); }, g), {uniform({3, 4}, g, 0.2, 2)}};
  });
  add("matmul", [](Rng& g) { return binary(g, &reltopo::matmul, {2, 3, 4}, {4, 5}); });
  add("batched_matmul", [](Rng& g) { return binary(g, &reltopo::batched_matmul, {2, 3, 4}, {2, 4, 2}); });
  add("reshape", [](Rng& g) {
    return Case{probed([](const std::vector<Tensor>& l) { return reshape(l[0], {4, 3}); }, g), {uniform({2, 6}, g, -1, 1)}};
  });
  add("transpose", [](Rng& g) {
    return Case{probed([](const std::vector<Tensor>& l) { return transpose(l[0]); }, g), {uniform({2, 3, 4}, g, -1, 1)}};
  });
  add("permute", [](Rng& g) {
    return Case{probed([](const std::vector<Tensor>& l) { return permute(l[0], {2, 0, 1}); }, g),
                {uniform({2, 3, 4}, g, -1, 1)}};
  });
  add("concat", [](Rng& g) {
    return Case{probed([](const std::vector<Tensor>& l) { return concat({l[0], l[1]}, 1); }, g),
                {uniform({2, 3}, g, -1, 1), uniform({2, 2}, g, -1, 1)}};
  });
  add("slice", [](Rng& g) {
    return Case{probed([](const std::vector<Tensor>& l) { return slice(l[0], 1, 1, 3); }, g), {uniform({2, 4}, g, -1, 1)}};
  });
  add("gather", [](Rng& g) {
    return Case{probed([](const std::vector<Tensor>& l) { return gather(l[0], {5, 0, 5, 2}); }, g),
                {uniform({2, 3}, g, -1, 1)}};
  });
  add("index_rows", [](Rng& g) {
    return Case{probed([](const std::vector<Tensor>& l) { return index_rows(l[0], {2, 0, 2}); }, g),
                {uniform({3, 2}, g, -1, 1)}};
  });
  add("sum", [](Rng& g) {
    return Case{[](const std::vector<Tensor>& l) { return scale(sum(l[0]), 0.7); }, {uniform({3, 4}, g, -1, 1)}};
  });
  add("sum_axis", [](Rng& g) {
    return Case{probed([](const std::vector<Tensor>& l) { return sum(l[0], 1); }, g), {uniform({2, 3, 4}, g, -1, 1)}};
  });
  add("mean", [](Rng& g) {
    return Case{[](const std::vector<Tensor>& l) { return mean(l[0]); }, {uniform({3, 4}, g, -1, 1)}};
  });
  add("mean_axis", [](Rng& g) {
    return Case{probed([](const std::vector<Tensor>& l) { return mean(l[0], 0); }, g), {uniform({3, 4}, g, -1, 1)}};
  });
  add("reduce_min", [](Rng& g) {
    return Case{probed([](const std::vector<Tensor>& l) { return reduce_min(l[0], 1); }, g), {uniform({3, 5}, g, -3, 3)}};
  });
  add("reduce_max", [](Rng& g) {
    return Case{probed([](const std::vector<Tensor>& l) { return reduce_max(l[0], 0); }, g), {uniform({4, 3}, g, -3, 3)}};
  });
  add("norm_lastdim", [](Rng& g) {
    return Case{probed([](const std::vector<Tensor>& l) { return norm_lastdim(l[0]); }, g), {uniform({4, 3}, g, -2, 2)}};
  });
  add("softmax_lastdim", [](Rng& g) {
    return Case{probed([](const std::vector<Tensor>& l) { return softmax_lastdim(l[0]); }, g),
                {uniform({3, 5}, g, -3, 3)}};
  });
  add("layer_norm", [](Rng& g) {
    return Case{probed([](const std::vector<Tensor>& l) { return layer_norm(l[0], l[1], l[2]); }, g),
                {uniform({3, 6}, g, -2, 2), uniform({6}, g, 0.5, 1.5), uniform({6}, g, -0.5, 0.5)}};
  });
  add("bilinear_sample", [](Rng& g) {
    return Case{probed([](const std::vector<Tensor>& l) { return bilinear_sample(l[0], l[1]); }, g),
                {uniform({4, 5, 2}, g, -1, 1), cell_coords({6, 2}, g, 3)}};
  });
  add("deformable_sample", [](Rng& g) {
    return Case{probed([](const std::vector<Tensor>& l) { return deformable_sample(l[0], l[1], l[2]); }, g),
                {uniform({4, 5, 4}, g, -1, 1), cell_coords({2, 2, 3, 2}, g, 3), uniform({2, 2, 3}, g, 0, 1)}};
  });

  // ---- composites ----
  add("linear", [](Rng& g) {
    auto ps = std::make_shared<ParameterSet>();
    const auto lin = nn::Linear::create(*ps, "lin", 4, 3, g);
    return Case{probed([lin, ps](const std::vector<Tensor>& l) { return lin(l[0]); }, g),
                with({uniform({2, 4}, g, -1, 1)}, ps->tensors())};
  });
  add("mlp", [](Rng& g) {
    auto ps = std::make_shared<ParameterSet>();
    const auto mlp = nn::Mlp::create(*ps, "mlp", 4, 6, 3, g);
    return Case{probed([mlp, ps](const std::vector<Tensor>& l) { return mlp(l[0]); }, g),
                with({uniform({3, 4}, g, -1, 1)}, ps->tensors())};
  });
  add("sinusoidal", [](Rng& g) {
    return Case{probed([](const std::vector<Tensor>& l) { return nn::sinusoidal(l[0], 6, 100.0, 2.0); }, g),
                {uniform({3, 2}, g, -1, 1)}};
  });
  add("geometry_biased_sa", [](Rng& g) {
    auto ps = std::make_shared<ParameterSet>();
    const auto mha = attn::MultiHeadAttention::create(*ps, "sa", 8, 2, g);
    const auto bias = attn::GeometryBiasParams::create(*ps, "geo", {4, 10000.0, 1.0}, 6, 2, g);
    std::vector<geom::BezierLane> lanes(3);
    std::uniform_real_distribution<double> u(-10, 10);
    for (auto& ln : lanes) ln.control_points = Eigen::Matrix<double, 4, 3>::NullaryExpr([&] { return u(g); });
    return Case{probed([=](const std::vector<Tensor>& l) {
                  return attn::geometry_biased_self_attention(l[0], lanes, mha, bias, &l[1]);
                }, g),
                with({uniform({3, 8}, g, -1, 1), uniform({3, 8}, g, -1, 1)}, ps->tensors())};
  });
  add("curve_guided_ca", [](Rng& g) {
    auto ps = std::make_shared<ParameterSet>();
    const auto ca = attn::DeformableAttentionParams::create(*ps, "ca", 8, 2, 3, 2, g);
    FeatureGrid grid;
    grid.values = uniform({6, 8, 8}, g, -1, 1);
    grid.extent = {0.0, 40.0, -15.0, 15.0};
    grid.frame = Frame::BEV;
    std::vector<double> cp;
    std::uniform_real_distribution<double> ux(5, 35), uy(-10, 10);
    for (int i = 0; i < 2 * 4; ++i) cp.insert(cp.end(), {ux(g), uy(g), 0.0});
    const Tensor curves({2, 4, 3}, cp, true);
    return Case{probed([=](const std::vector<Tensor>& l) {
                  FeatureGrid gr = grid;
                  gr.values = l[2];
                  return attn::curve_guided_cross_attention(l[0], l[1], gr, ca, 3);
                }, g),
                with({uniform({2, 8}, g, -1, 1), curves, grid.values}, ps->tensors())};
  });
  add("l2l_relation_embedding", [](Rng& g) {
    auto ps = std::make_shared<ParameterSet>();
    topo::TopologyConfig cfg;
    cfg.channels = 4;
    cfg.hidden = 6;
    cfg.endpoint_encoding.output_dim = 4;
    cfg.distance_encoding.output_dim = 4;
    const auto head = topo::L2LHead::create(*ps, "l2l", cfg, {0, 40, -10, 20, -2, 4}, g);
    return Case{probed([=](const std::vector<Tensor>& l) {
                  return topo::l2l_relation_embedding(l[0], l[1], l[2], head).values;
                }, g),
                with({uniform({3, 4}, g, -1, 1), uniform({3, 3}, g, -5, 30), uniform({3, 3}, g, -5, 30)},
                     ps->tensors())};
  });
  add("l2l_predict", [](Rng& g) {
    auto ps = std::make_shared<ParameterSet>();
    topo::TopologyConfig cfg;
    cfg.channels = 4;
    cfg.hidden = 6;
    cfg.endpoint_encoding.output_dim = 4;
    cfg.distance_encoding.output_dim = 4;
    const auto head = topo::L2LHead::create(*ps, "l2l", cfg, {0, 40, -10, 20, -2, 4}, g);
    return Case{probed([=](const std::vector<Tensor>& l) {
                  const auto rel = topo::l2l_relation_embedding(l[0], l[1], l[2], head);
                  return topo::l2l_predict(rel, topo::l2l_dist_embed(l[1], l[2], head), head).logits;
                }, g),
                with({uniform({3, 4}, g, -1, 1), uniform({3, 3}, g, -5, 30), uniform({3, 3}, g, -5, 30)},
                     ps->tensors())};
  });
  add("l2t_head", [](Rng& g) {
    auto ps = std::make_shared<ParameterSet>();
    topo::TopologyConfig cfg;
    cfg.channels = 4;
    cfg.hidden = 6;
    cfg.samples = 5;
    const auto head = topo::L2THead::create(*ps, "l2t", cfg, 3, g);
    FeatureGrid fv;
    fv.values = uniform({8, 16, 3}, g, -1, 1);
    fv.extent = {0.0, 160.0, 0.0, 80.0};
    fv.frame = Frame::FV;
    const auto cam = small_camera();
    std::vector<double> boxes;
    std::uniform_real_distribution<double> c(0.2, 0.8), s(0.05, 0.2);
    for (int i = 0; i < 2; ++i) boxes.insert(boxes.end(), {c(g), c(g), s(g), s(g)});
    return Case{probed([=](const std::vector<Tensor>& l) {
                  FeatureGrid f = fv;
                  f.values = l[4];
                  return topo::l2t_align_and_predict(l[0], l[1], cam, f, l[2], l[3], head).logits;
                }, g),
                with({uniform({3, 4}, g, -1, 1), curves_ahead(3, g), uniform({2, 4}, g, -1, 1),
                      Tensor({2, 4}, boxes, true), fv.values},
                     ps->tensors())};
  });
  add("focal_loss", [](Rng& g) {
    std::bernoulli_distribution b(0.4);
    std::vector<double> t(8);
    for (double& v : t) v = b(g);
    const Tensor targets({2, 4}, t);
    return Case{[targets](const std::vector<Tensor>& l) { return train::focal_loss(l[0], targets); },
                {uniform({2, 4}, g, -4, 4)}};
  });
  add("giou_loss", [](Rng& g) {
    std::vector<double> p, q;
    std::uniform_real_distribution<double> c(-1, 1), s(0.5, 2);
    for (int i = 0; i < 3; ++i) {
      p.insert(p.end(), {c(g), c(g), s(g), s(g)});
      q.insert(q.end(), {c(g), c(g), s(g), s(g)});
    }
    const Tensor gt({3, 4}, q);
    return Case{probed([gt](const std::vector<Tensor>& l) { return train::giou_loss(l[0], gt); }, g),
                {Tensor({3, 4}, p, true)}};
  });
  add("l1_loss", [](Rng& g) {
    const Tensor gt = uniform({3, 4, 3}, g, -5, 5, false);
    Tensor pred = away_from_zero({3, 4, 3}, g, 0.1, 2);
    auto d = pred.mutable_data();
    for (std::size_t k = 0; k < d.size(); ++k) d[k] += gt.data()[k];
    return Case{[gt](const std::vector<Tensor>& l) { return sum(abs(sub(l[0], gt))); }, {pred}};
  });
  add("bezier_chamfer_loss", [](Rng& g) {
    const Tensor gt = uniform({2, 4, 3}, g, -5, 5, false);
    return Case{probed([gt](const std::vector<Tensor>& l) { return train::bezier_chamfer_loss(l[0], gt, 11); }, g),
                {uniform({2, 4, 3}, g, -5, 5)}};
  });
  add("infonce_loss", [](Rng& g) {
    std::bernoulli_distribution b(0.35);
    train::Adjacency gt(3, std::vector<std::uint8_t>(5, 0));
    for (auto& row : gt)
      for (auto& v : row) v = b(g);
    gt[0][0] = 1;
    gt[0][1] = 0;
    return Case{[gt](const std::vector<Tensor>& l) { return train::infonce_topology_loss(l[0], gt, 3); },
                {uniform({3, 5}, g, -3, 3)}};
  });
  add("total_loss", [](Rng& g) {
    ModelConfig mc;
    mc.lane.queries = 3;
    mc.lane.channels = 8;
    mc.lane.heads = 2;
    mc.lane.ffn_hidden = 8;
    mc.lane.ge_hidden = 4;
    mc.lane.samples = 3;
    mc.lane.layers = 1;
    mc.lane.geometry_encoding.output_dim = 4;
    mc.te.queries = 2;
    mc.topology.channels = 8;
    mc.topology.hidden = 4;
    mc.topology.samples = 3;
    mc.topology.endpoint_encoding.output_dim = 4;
    mc.topology.distance_encoding.output_dim = 4;
    mc.detach_topology_geometry = false;
    mc.detach_topology_queries = false;
    auto model = std::make_shared<Model>(Model::create(mc, g()));
    scenes::SceneConfig sc;
    sc.bev_rows = 8;
    sc.bev_cols = 16;
    sc.fv_rows = 6;
    sc.fv_cols = 12;
    auto prep = std::make_shared<train::PreparedScene>(train::prepare(scenes::generate_scene(sc, g()), sc));
    std::vector<Tensor> leaves;
    for (const char* n : {"lane.layer0.reg.bias", "lane.layer0.cls.bias", "te.layer0.reg.bias", "te.layer0.cls.bias",
                          "l2l.out.1.bias", "l2t.out.1.bias", "lane.layer0.ffn.1.bias"}) {
      leaves.push_back(model->params.at(n));
    }
    return Case{[model, prep](const std::vector<Tensor>&) {
                  const auto out = full_forward(*model, prep->grids.bev, prep->grids.fv, prep->scene.camera);
                  return train::total_loss(out, prep->targets, {}, {}).total;
                },
                leaves};
  });
  return r;
}

}  // namespace

std::vector<std::string> suite_names() {
  std::vector<std::string> names;
  for (const auto& [n, b] : registry()) names.push_back(n);
  return names;
}

std::vector<CheckResult> run_suite(int cases, std::uint64_t seed) {
  if (cases < 1) throw ConfigError("gradcheck: need at least one case");
  std::vector<CheckResult> results;
  std::uint64_t offset = 0;
  for (const auto& [name, build] : registry()) {
    CheckResult res;
    res.name = name;
    for (int c = 0; c < cases; ++c) {
      Rng rng(seed + 1000003ULL * offset + static_cast<std::uint64_t>(c));
      try {
        Case k = build(rng);
        res.max_rel_error = std::max(res.max_rel_error, max_relative_error(k.loss, k.leaves));
      } catch (const std::exception& e) {
        res.failure = e.what();
        res.max_rel_error = std::numeric_limits<double>::infinity();
        break;
      }
      ++res.cases;
    }
    res.passed = res.failure.empty() && res.max_rel_error < kTolerance;
    results.push_back(res);
    ++offset;
  }
  return results;
}

}  // namespace reltopo::gradcheck
