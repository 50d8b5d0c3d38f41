#include "cordseg/onnx.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <string_view>

#include <nlohmann/json.hpp>

namespace cordseg::onnx {

static_assert(std::endian::native == std::endian::little, "raw tensor data is written in host order");

namespace {

// ---------------------------------------------------------------------------
// protobuf wire format

class Writer {
public:
  void varint(std::uint64_t v) {
    while (v >= 0x80) {
      buf_.push_back(static_cast<char>((v & 0x7f) | 0x80));
      v >>= 7;
    }
    buf_.push_back(static_cast<char>(v));
  }
  void tag(int field, int wire) { varint((std::uint64_t(field) << 3) | std::uint64_t(wire)); }
  void i64(int field, std::int64_t v) {
    tag(field, 0);
    varint(static_cast<std::uint64_t>(v));
  }
  void f32(int field, float v) {
    tag(field, 5);
    char b[4];
    std::memcpy(b, &v, 4);
    buf_.append(b, 4);
  }
  void bytes(int field, std::string_view s) {
    tag(field, 2);
    varint(s.size());
    buf_.append(s);
  }
  void msg(int field, const Writer &w) { bytes(field, w.buf_); }
  const std::string &str() const { return buf_; }

private:
  std::string buf_;
};

struct Field {
  int number = 0;
  int wire = 0;
  std::uint64_t value = 0; // varint / fixed
  std::string_view bytes;  // length-delimited
};

[[noreturn]] void malformed(const std::string &what) {
  throw Error(ErrorKind::ExportParityFailure, "malformed ONNX model: " + what);
}

std::uint64_t read_varint(std::string_view s, std::size_t &pos) {
  std::uint64_t v = 0;
  for (int shift = 0; shift < 64; shift += 7) {
    if (pos >= s.size()) malformed("truncated varint");
    const auto b = static_cast<unsigned char>(s[pos++]);
    v |= std::uint64_t(b & 0x7f) << shift;
    if (!(b & 0x80)) return v;
  }
  malformed("varint too long");
}

std::vector<Field> read_fields(std::string_view s) {
  std::vector<Field> out;
  std::size_t pos = 0;
  while (pos < s.size()) {
    const std::uint64_t key = read_varint(s, pos);
    Field f;
    f.number = static_cast<int>(key >> 3);
    f.wire = static_cast<int>(key & 7);
    switch (f.wire) {
    case 0: f.value = read_varint(s, pos); break;
    case 1:
      if (pos + 8 > s.size()) malformed("truncated fixed64");
      std::memcpy(&f.value, s.data() + pos, 8);
      pos += 8;
      break;
    case 2: {
      const std::uint64_t n = read_varint(s, pos);
      if (n > s.size() - pos) malformed("truncated field");
      f.bytes = s.substr(pos, n);
      pos += n;
      break;
    }
    case 5: {
      if (pos + 4 > s.size()) malformed("truncated fixed32");
      std::uint32_t v;
      std::memcpy(&v, s.data() + pos, 4);
      f.value = v;
      pos += 4;
      break;
    }
    default: malformed("unsupported wire type");
    }
    out.push_back(f);
  }
  return out;
}

// repeated int64, packed or not
void read_ints(const Field &f, std::vector<std::int64_t> &out) {
  if (f.wire == 0) {
    out.push_back(static_cast<std::int64_t>(f.value));
  } else if (f.wire == 2) {
    std::size_t pos = 0;
    while (pos < f.bytes.size()) out.push_back(static_cast<std::int64_t>(read_varint(f.bytes, pos)));
  } else {
    malformed("bad integer encoding");
  }
}

// ---------------------------------------------------------------------------
// export

constexpr int kFloat = 1;       // TensorProto.FLOAT
constexpr int kAttrFloat = 1;   // AttributeProto types
constexpr int kAttrInt = 2;
constexpr int kAttrString = 3;
constexpr int kAttrInts = 7;

Writer attr_int(const char *name, std::int64_t v) {
  Writer a;
  a.bytes(1, name);
  a.i64(3, v);
  a.i64(20, kAttrInt);
  return a;
}
Writer attr_float(const char *name, float v) {
  Writer a;
  a.bytes(1, name);
  a.f32(2, v);
  a.i64(20, kAttrFloat);
  return a;
}
Writer attr_string(const char *name, const std::string &v) {
  Writer a;
  a.bytes(1, name);
  a.bytes(4, v);
  a.i64(20, kAttrString);
  return a;
}
Writer attr_ints(const char *name, const std::vector<std::int64_t> &v) {
  Writer a;
  a.bytes(1, name);
  for (std::int64_t x : v) a.i64(8, x);
  a.i64(20, kAttrInts);
  return a;
}

Writer tensor_proto(const std::string &name, const std::vector<std::int64_t> &dims, const float *data,
                    std::size_t n) {
  Writer t;
  for (std::int64_t d : dims) t.i64(1, d);
  t.i64(2, kFloat);
  t.bytes(8, name);
  t.bytes(9, std::string_view(reinterpret_cast<const char *>(data), n * sizeof(float)));
  return t;
}

Writer value_info(const std::string &name, std::int64_t channels) {
  Writer shape;
  for (int i = 0; i < 5; ++i) {
    Writer dim;
    if (i == 0) dim.i64(1, 1);
    else if (i == 1) dim.i64(1, channels);
    else dim.bytes(2, std::string(1, "DHW"[i - 2]));
    shape.msg(1, dim);
  }
  Writer tt;
  tt.i64(1, kFloat);
  tt.msg(2, shape);
  Writer type;
  type.msg(1, tt);
  Writer vi;
  vi.bytes(1, name);
  vi.msg(2, type);
  return vi;
}

class GraphBuilder {
public:
  explicit GraphBuilder(const UNet3D &m) : model_(m) {}

  std::string node(const std::string &op, const std::vector<std::string> &inputs, std::vector<Writer> attrs = {}) {
    const std::string out = op + "_" + std::to_string(counter_++);
    Writer n;
    for (const auto &i : inputs) n.bytes(1, i);
    n.bytes(2, out);
    n.bytes(3, out);
    n.bytes(4, op);
    for (const auto &a : attrs) n.msg(5, a);
    graph_.msg(1, n);
    return out;
  }

  const std::string &param(const std::string &name) {
    if (!used_.count(name)) {
      const Parameter &p = model_.parameter(name);
      graph_inits_.push_back(tensor_proto(name, p.onnx_shape, p.value.data(), std::size_t(p.value.size())));
      used_.insert(name);
    }
    return *used_.find(name);
  }

  std::string conv(const std::string &in, const std::string &prefix, int kernel, int stride, bool bias) {
    std::vector<std::string> inputs{in, param(prefix + ".weight")};
    if (bias) inputs.push_back(param(prefix + ".bias"));
    const std::int64_t p = kernel / 2;
    return node("Conv", inputs,
                {attr_ints("kernel_shape", {kernel, kernel, kernel}), attr_ints("pads", {p, p, p, p, p, p}),
                 attr_ints("strides", {stride, stride, stride})});
  }

  std::string block(const std::string &in, const std::string &prefix, int stride) {
    const ModelConfig &c = model_.config();
    const std::string x = conv(in, prefix, 3, stride, false);
    const std::string n = node("InstanceNormalization", {x, param(prefix + ".gamma"), param(prefix + ".beta")},
                               {attr_float("epsilon", static_cast<float>(c.norm_eps))});
    return node("LeakyRelu", {n}, {attr_float("alpha", static_cast<float>(c.leaky_slope))});
  }

  std::string build() {
    const ModelConfig &c = model_.config();
    const int d = c.depth;
    std::vector<std::string> skips(d + 1);
    std::string prev = "input";
    for (int l = 0; l <= d; ++l) {
      const std::string p = "enc" + std::to_string(l);
      prev = block(block(prev, p + ".a", l == 0 ? 1 : 2), p + ".b", 1);
      skips[l] = prev;
    }
    std::map<int, std::string> aux;
    const auto levels = c.aux_levels();
    for (int l = d - 1; l >= 0; --l) {
      const std::string p = "dec" + std::to_string(l);
      const std::string up = node("ConvTranspose", {prev, param(p + ".up.weight"), param(p + ".up.bias")},
                                  {attr_ints("kernel_shape", {2, 2, 2}), attr_ints("strides", {2, 2, 2})});
      const std::string cat = node("Concat", {skips[l], up}, {attr_int("axis", 1)});
      prev = block(block(cat, p + ".a", 1), p + ".b", 1);
      if (std::find(levels.begin(), levels.end(), l) != levels.end())
        aux[l] = conv(prev, "aux" + std::to_string(l), 1, 1, true);
    }
    std::string logits = conv(prev, "head", 1, 1, true);
    if (!levels.empty()) {
      const float scales[5] = {1, 1, 2, 2, 2};
      graph_inits_.push_back(tensor_proto("upsample_scales", {5}, scales, 5));
      std::string sum = aux.at(levels.front());
      for (int l = levels.front() - 1; l >= 0; --l) {
        sum = node("Resize", {sum, "", "upsample_scales"},
                   {attr_string("mode", "nearest"), attr_string("coordinate_transformation_mode", "asymmetric"),
                    attr_string("nearest_mode", "floor")});
        if (l > 0 && aux.count(l)) sum = node("Add", {sum, aux.at(l)});
      }
      logits = node("Add", {logits, sum});
    }
    return node("Sigmoid", {logits});
  }

  std::string serialize() {
    const ModelConfig &c = model_.config();
    const std::string out = build();
    Writer g = graph_;
    g.bytes(2, "cordseg_unet3d");
    for (const auto &t : graph_inits_) g.msg(5, t);
    g.msg(11, value_info("input", c.in_channels));
    // rename the last node output
    Writer ident;
    ident.bytes(1, out);
    ident.bytes(2, "prob");
    ident.bytes(3, "output");
    ident.bytes(4, "Identity");
    g.msg(1, ident);
    g.msg(12, value_info("prob", c.out_channels));

    Writer m;
    m.i64(1, kIrVersion);
    m.bytes(2, "cordseg");
    m.bytes(3, kPipelineVersion);
    m.msg(7, g);
    Writer opset;
    opset.bytes(1, "");
    opset.i64(2, kOpset);
    m.msg(8, opset);
    Writer meta;
    meta.bytes(1, "model_config");
    meta.bytes(2, nlohmann::json(c).dump());
    m.msg(14, meta);
    return m.str();
  }

private:
  const UNet3D &model_;
  Writer graph_;
  std::vector<Writer> graph_inits_;
  std::set<std::string> used_;
  int counter_ = 0;
};

// ---------------------------------------------------------------------------
// reference ops, N = 1, row-major NCDHW

struct Shape5 {
  std::int64_t c, d, h, w;
};

Shape5 shape5(const Tensor &t, const char *op) {
  if (t.dims.size() != 5 || t.dims[0] != 1) malformed(std::string(op) + " expects a [1,C,D,H,W] tensor");
  return {t.dims[1], t.dims[2], t.dims[3], t.dims[4]};
}

std::vector<std::int64_t> ints_or(const Graph::Node &n, const char *name, std::vector<std::int64_t> dflt) {
  const auto *a = n.attribute(name);
  return a ? a->ints : dflt;
}

Tensor op_conv(const Graph::Node &n, const Tensor &x, const Tensor &w, const Tensor *b) {
  const Shape5 s = shape5(x, "Conv");
  if (w.dims.size() != 5 || w.dims[1] != s.c) malformed("Conv weight shape");
  const std::int64_t O = w.dims[0], kd = w.dims[2], kh = w.dims[3], kw = w.dims[4];
  const auto pads = ints_or(n, "pads", {0, 0, 0, 0, 0, 0});
  const auto st = ints_or(n, "strides", {1, 1, 1});
  const std::int64_t od = (s.d + pads[0] + pads[3] - kd) / st[0] + 1;
  const std::int64_t oh = (s.h + pads[1] + pads[4] - kh) / st[1] + 1;
  const std::int64_t ow = (s.w + pads[2] + pads[5] - kw) / st[2] + 1;
  Tensor y{{1, O, od, oh, ow}, std::vector<float>(std::size_t(O * od * oh * ow), 0.f)};
  for (std::int64_t o = 0; o < O; ++o) {
    float *yo = y.data.data() + o * od * oh * ow;
    if (b) std::fill(yo, yo + od * oh * ow, b->data[std::size_t(o)]);
    for (std::int64_t c = 0; c < s.c; ++c) {
      const float *xc = x.data.data() + c * s.d * s.h * s.w;
      for (std::int64_t a = 0; a < kd; ++a)
        for (std::int64_t bb = 0; bb < kh; ++bb)
          for (std::int64_t e = 0; e < kw; ++e) {
            const float wv = w.data[std::size_t((((o * s.c + c) * kd + a) * kh + bb) * kw + e)];
            // valid output x range: 0 <= ox*st - pad + e < W
            std::int64_t x0 = 0, x1 = ow;
            while (x0 < ow && x0 * st[2] - pads[2] + e < 0) ++x0;
            while (x1 > x0 && (x1 - 1) * st[2] - pads[2] + e >= s.w) --x1;
            for (std::int64_t z = 0; z < od; ++z) {
              const std::int64_t iz = z * st[0] - pads[0] + a;
              if (iz < 0 || iz >= s.d) continue;
              for (std::int64_t yy = 0; yy < oh; ++yy) {
                const std::int64_t iy = yy * st[1] - pads[1] + bb;
                if (iy < 0 || iy >= s.h) continue;
                const float *row = xc + (iz * s.h + iy) * s.w - pads[2] + e;
                float *out = yo + (z * oh + yy) * ow;
                if (st[2] == 1)
                  for (std::int64_t ox = x0; ox < x1; ++ox) out[ox] += wv * row[ox];
                else
                  for (std::int64_t ox = x0; ox < x1; ++ox) out[ox] += wv * row[ox * st[2]];
              }
            }
          }
    }
  }
  return y;
}

Tensor op_conv_transpose(const Graph::Node &n, const Tensor &x, const Tensor &w, const Tensor *b) {
  const Shape5 s = shape5(x, "ConvTranspose");
  if (w.dims.size() != 5 || w.dims[0] != s.c) malformed("ConvTranspose weight shape");
  const std::int64_t O = w.dims[1], kd = w.dims[2], kh = w.dims[3], kw = w.dims[4];
  const auto st = ints_or(n, "strides", {1, 1, 1});
  const std::int64_t od = (s.d - 1) * st[0] + kd, oh = (s.h - 1) * st[1] + kh, ow = (s.w - 1) * st[2] + kw;
  Tensor y{{1, O, od, oh, ow}, std::vector<float>(std::size_t(O * od * oh * ow), 0.f)};
  for (std::int64_t o = 0; o < O; ++o) {
    float *yo = y.data.data() + o * od * oh * ow;
    if (b) std::fill(yo, yo + od * oh * ow, b->data[std::size_t(o)]);
    for (std::int64_t c = 0; c < s.c; ++c) {
      const float *xc = x.data.data() + c * s.d * s.h * s.w;
      for (std::int64_t a = 0; a < kd; ++a)
        for (std::int64_t bb = 0; bb < kh; ++bb)
          for (std::int64_t e = 0; e < kw; ++e) {
            const float wv = w.data[std::size_t((((c * O + o) * kd + a) * kh + bb) * kw + e)];
            for (std::int64_t z = 0; z < s.d; ++z)
              for (std::int64_t yy = 0; yy < s.h; ++yy) {
                const float *row = xc + (z * s.h + yy) * s.w;
                float *out = yo + ((z * st[0] + a) * oh + yy * st[1] + bb) * ow + e;
                for (std::int64_t ix = 0; ix < s.w; ++ix) out[ix * st[2]] += wv * row[ix];
              }
          }
    }
  }
  return y;
}

Tensor op_instance_norm(const Graph::Node &n, const Tensor &x, const Tensor &scale, const Tensor &bias) {
  const Shape5 s = shape5(x, "InstanceNormalization");
  const auto *a = n.attribute("epsilon");
  const double eps = a ? a->f : 1e-5;
  const std::int64_t m = s.d * s.h * s.w;
  Tensor y = x;
  for (std::int64_t c = 0; c < s.c; ++c) {
    float *p = y.data.data() + c * m;
    double mean = 0, var = 0;
    for (std::int64_t i = 0; i < m; ++i) mean += p[i];
    mean /= double(m);
    for (std::int64_t i = 0; i < m; ++i) var += (p[i] - mean) * (p[i] - mean);
    var /= double(m);
    const double k = scale.data[std::size_t(c)] / std::sqrt(var + eps);
    for (std::int64_t i = 0; i < m; ++i) p[i] = static_cast<float>((p[i] - mean) * k + bias.data[std::size_t(c)]);
  }
  return y;
}

Tensor op_resize(const Tensor &x, const Tensor &scales) {
  const Shape5 s = shape5(x, "Resize");
  if (scales.numel() != 5 || scales.data[0] != 1.f || scales.data[1] != 1.f) malformed("Resize scales");
  const std::int64_t od = std::int64_t(std::floor(s.d * double(scales.data[2])));
  const std::int64_t oh = std::int64_t(std::floor(s.h * double(scales.data[3])));
  const std::int64_t ow = std::int64_t(std::floor(s.w * double(scales.data[4])));
  Tensor y{{1, s.c, od, oh, ow}, std::vector<float>(std::size_t(s.c * od * oh * ow))};
  for (std::int64_t c = 0; c < s.c; ++c)
    for (std::int64_t z = 0; z < od; ++z)
      for (std::int64_t yy = 0; yy < oh; ++yy)
        for (std::int64_t xx = 0; xx < ow; ++xx) {
          const auto iz = std::min(s.d - 1, std::int64_t(std::floor(z / double(scales.data[2]))));
          const auto iy = std::min(s.h - 1, std::int64_t(std::floor(yy / double(scales.data[3]))));
          const auto ix = std::min(s.w - 1, std::int64_t(std::floor(xx / double(scales.data[4]))));
          y.data[std::size_t(((c * od + z) * oh + yy) * ow + xx)] =
              x.data[std::size_t(((c * s.d + iz) * s.h + iy) * s.w + ix)];
        }
  return y;
}

Tensor op_concat(const Tensor &a, const Tensor &b) {
  const Shape5 sa = shape5(a, "Concat"), sb = shape5(b, "Concat");
  if (sa.d != sb.d || sa.h != sb.h || sa.w != sb.w) malformed("Concat spatial shapes differ");
  Tensor y{{1, sa.c + sb.c, sa.d, sa.h, sa.w}, a.data};
  y.data.insert(y.data.end(), b.data.begin(), b.data.end());
  return y;
}

} // namespace

std::int64_t Tensor::numel() const {
  std::int64_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

std::string export_model(const UNet3D &model) { return GraphBuilder(model).serialize(); }

void save_model(const UNet3D &model, const std::filesystem::path &path) {
  const std::string bytes = export_model(model);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::IoFailure, "cannot write " + path.string());
  out.write(bytes.data(), std::streamsize(bytes.size()));
  if (!out) throw Error(ErrorKind::IoFailure, "write failed: " + path.string());
}

const Graph::Attribute *Graph::Node::attribute(const std::string &n) const {
  for (const auto &a : attributes)
    if (a.name == n) return &a;
  return nullptr;
}

Graph Graph::parse(const std::string &bytes) {
  Graph g;
  std::string_view graph_bytes;
  for (const Field &f : read_fields(bytes)) {
    if (f.number == 1 && f.wire == 0) g.ir_version = std::int64_t(f.value);
    else if (f.number == 2 && f.wire == 2) g.producer = std::string(f.bytes);
    else if (f.number == 7 && f.wire == 2) graph_bytes = f.bytes;
    else if (f.number == 8 && f.wire == 2) {
      for (const Field &o : read_fields(f.bytes))
        if (o.number == 2) g.opset = std::int64_t(o.value);
    } else if (f.number == 14 && f.wire == 2) {
      std::pair<std::string, std::string> kv;
      for (const Field &o : read_fields(f.bytes))
        (o.number == 1 ? kv.first : kv.second) = std::string(o.bytes);
      g.metadata.push_back(kv);
    }
  }
  if (graph_bytes.empty()) malformed("no graph");

  for (const Field &f : read_fields(graph_bytes)) {
    if (f.wire != 2) continue;
    if (f.number == 1) {
      Node n;
      for (const Field &nf : read_fields(f.bytes)) {
        if (nf.number == 1) n.inputs.emplace_back(nf.bytes);
        else if (nf.number == 2) n.outputs.emplace_back(nf.bytes);
        else if (nf.number == 3) n.name = std::string(nf.bytes);
        else if (nf.number == 4) n.op_type = std::string(nf.bytes);
        else if (nf.number == 5) {
          Attribute a;
          for (const Field &af : read_fields(nf.bytes)) {
            if (af.number == 1) a.name = std::string(af.bytes);
            else if (af.number == 2) {
              const auto v = static_cast<std::uint32_t>(af.value);
              std::memcpy(&a.f, &v, 4);
            } else if (af.number == 3) a.i = std::int64_t(af.value);
            else if (af.number == 4) a.s = std::string(af.bytes);
            else if (af.number == 8) read_ints(af, a.ints);
          }
          n.attributes.push_back(std::move(a));
        }
      }
      g.nodes.push_back(std::move(n));
    } else if (f.number == 5) {
      std::string name;
      Tensor t;
      std::int64_t type = 0;
      std::string_view raw;
      for (const Field &tf : read_fields(f.bytes)) {
        if (tf.number == 1) read_ints(tf, t.dims);
        else if (tf.number == 2) type = std::int64_t(tf.value);
        else if (tf.number == 8) name = std::string(tf.bytes);
        else if (tf.number == 9) raw = tf.bytes;
      }
      if (type != kFloat) malformed("initializer " + name + " is not float");
      if (raw.size() != std::size_t(t.numel()) * sizeof(float)) malformed("initializer " + name + " size");
      t.data.resize(std::size_t(t.numel()));
      std::memcpy(t.data.data(), raw.data(), raw.size());
      g.initializers.emplace_back(std::move(name), std::move(t));
    } else if (f.number == 11 || f.number == 12) {
      for (const Field &vf : read_fields(f.bytes))
        if (vf.number == 1) (f.number == 11 ? g.input_name : g.output_name) = std::string(vf.bytes);
    }
  }
  if (g.input_name.empty() || g.output_name.empty()) malformed("graph input/output missing");
  return g;
}

Graph Graph::load(const std::filesystem::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::FileNotFound, path.string());
  return parse(std::string(std::istreambuf_iterator<char>(in), {}));
}

Tensor Graph::run(const Tensor &input) const {
  std::map<std::string, Tensor> env;
  for (const auto &[name, t] : initializers) env[name] = t;
  env[input_name] = input;
  auto get = [&](const Node &n, std::size_t i) -> const Tensor & {
    if (i >= n.inputs.size()) malformed(n.op_type + " is missing input " + std::to_string(i));
    const auto it = env.find(n.inputs[i]);
    if (it == env.end()) malformed("undefined tensor " + n.inputs[i]);
    return it->second;
  };
  auto opt = [&](const Node &n, std::size_t i) -> const Tensor * {
    return i < n.inputs.size() && !n.inputs[i].empty() ? &get(n, i) : nullptr;
  };
  std::map<std::string, std::size_t> last_use;
  for (std::size_t k = 0; k < nodes.size(); ++k)
    for (const auto &i : nodes[k].inputs) last_use[i] = k;
  for (std::size_t k = 0; k < nodes.size(); ++k) {
    const Node &n = nodes[k];
    Tensor y;
    if (n.op_type == "Conv") y = op_conv(n, get(n, 0), get(n, 1), opt(n, 2));
    else if (n.op_type == "ConvTranspose") y = op_conv_transpose(n, get(n, 0), get(n, 1), opt(n, 2));
    else if (n.op_type == "InstanceNormalization") y = op_instance_norm(n, get(n, 0), get(n, 1), get(n, 2));
    else if (n.op_type == "LeakyRelu") {
      const auto *a = n.attribute("alpha");
      const float alpha = a ? a->f : 0.01f;
      y = get(n, 0);
      for (float &v : y.data) v = v < 0 ? alpha * v : v;
    } else if (n.op_type == "Concat") y = op_concat(get(n, 0), get(n, 1));
    else if (n.op_type == "Resize") y = op_resize(get(n, 0), get(n, 2));
    else if (n.op_type == "Add") {
      const Tensor &a = get(n, 0), &b = get(n, 1);
      if (a.dims != b.dims) malformed("Add shapes differ");
      y = a;
      for (std::size_t i = 0; i < y.data.size(); ++i) y.data[i] += b.data[i];
    } else if (n.op_type == "Sigmoid") {
      y = get(n, 0);
      for (float &v : y.data) v = static_cast<float>(1.0 / (1.0 + std::exp(-double(v))));
    } else if (n.op_type == "Identity") y = get(n, 0);
    else malformed("unsupported op " + n.op_type);
    if (n.outputs.size() != 1) malformed(n.op_type + " must have one output");
    env[n.outputs[0]] = std::move(y);
    for (const auto &i : n.inputs)
      if (!i.empty() && i != output_name && last_use[i] == k) env.erase(i);
  }
  const auto it = env.find(output_name);
  if (it == env.end()) malformed("output never produced");
  return it->second;
}

FeatureMap Graph::run(const FeatureMap &input) const {
  Tensor t{{1, input.dimension(3), input.dimension(2), input.dimension(1), input.dimension(0)},
           std::vector<float>(input.data(), input.data() + input.size())};
  const Tensor y = run(t);
  const Shape5 s = shape5(y, "output");
  FeatureMap out(s.w, s.h, s.d, s.c);
  std::copy(y.data.begin(), y.data.end(), out.data());
  return out;
}

ParityReport check_parity(const UNet3D &model, const Graph &graph, const Index3 &patch_shape, int n,
                          std::uint64_t seed, double tolerance) {
  ParityReport r;
  r.tolerance = tolerance;
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> dist(0.f, 1.f);
  for (int k = 0; k < n; ++k) {
    FeatureMap x(patch_shape[0], patch_shape[1], patch_shape[2], model.config().in_channels);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = dist(rng);
    const FeatureMap a = model.forward(x);
    const FeatureMap b = graph.run(x);
    if (a.dimensions() != b.dimensions()) throw Error(ErrorKind::ExportParityFailure, "exported output shape differs");
    const Eigen::Tensor<float, 0> d = (a - b).abs().maximum();
    r.max_abs_diff.push_back(d());
    r.worst = std::max(r.worst, double(d()));
  }
  r.passed = r.worst <= tolerance;
  return r;
}

} // namespace cordseg::onnx
