#include "hmnas/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "hmnas/error.hpp"
#include "json.hpp"

namespace hmnas {

using json = nlohmann::json;

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint tensors are stored as native little-endian");

constexpr char kMagic[4] = {'H', 'M', 'C', 'K'};
constexpr std::size_t kHeader = 4 + 4 + 8 + 8;

std::uint64_t fnv1a(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ull;
  }
  return h;
}

json tensor_json(const Tensor& t) {
  std::vector<std::uint8_t> raw(t.numel() * sizeof(double));
  if (!raw.empty()) std::memcpy(raw.data(), t.storage().data(), raw.size());
  return {{"shape", t.shape()}, {"data", json::binary(std::move(raw))}};
}

Tensor tensor_from(const json& j) {
  const Shape shape = j.at("shape").get<Shape>();
  const auto& raw = j.at("data").get_binary();
  if (shape.empty()) {
    if (!raw.empty()) throw IntegrityError("checkpoint tensor has data but no shape");
    return Tensor();
  }
  Tensor t(shape, 0.0);
  if (raw.size() != t.numel() * sizeof(double)) throw IntegrityError("checkpoint tensor size does not match its shape");
  std::memcpy(t.storage().data(), raw.data(), raw.size());
  return t;
}

json tensors_json(const std::vector<Tensor>& ts) {
  json a = json::array();
  for (const auto& t : ts) a.push_back(tensor_json(t));
  return a;
}

std::vector<Tensor> tensors_from(const json& j) {
  std::vector<Tensor> out;
  for (const auto& e : j) out.push_back(tensor_from(e));
  return out;
}

template <std::size_t N>
json array_json(const std::array<Tensor, N>& a) {
  return tensors_json(std::vector<Tensor>(a.begin(), a.end()));
}

template <std::size_t N>
std::array<Tensor, N> array_from(const json& j) {
  const auto v = tensors_from(j);
  if (v.size() != N) throw IntegrityError("checkpoint tensor group has the wrong length");
  std::array<Tensor, N> a;
  std::copy(v.begin(), v.end(), a.begin());
  return a;
}

json spec_json(const SearchSpaceSpec& s) {
  std::vector<std::string> ops;
  for (auto o : s.ops) ops.emplace_back(op_name(o));
  json j = {{"nodes_per_cell", s.nodes_per_cell}, {"num_cells", s.num_cells}, {"init_channels", s.init_channels},
            {"in_channels", s.in_channels},       {"num_classes", s.num_classes}, {"ops", ops}};
  j["reduction_cells"] = s.reduction_cells ? json(*s.reduction_cells) : json(nullptr);
  return j;
}

SearchSpaceSpec spec_from(const json& j) {
  SearchSpaceSpec s;
  s.nodes_per_cell = j.at("nodes_per_cell");
  s.num_cells = j.at("num_cells");
  s.init_channels = j.at("init_channels");
  s.in_channels = j.at("in_channels");
  s.num_classes = j.at("num_classes");
  s.ops.clear();
  for (const auto& name : j.at("ops")) {
    const auto k = parse_op(name.get<std::string>());
    if (!k) throw IntegrityError("checkpoint names an unknown operation");
    s.ops.push_back(*k);
  }
  if (j.at("reduction_cells").is_null()) {
    s.reduction_cells.reset();
  } else {
    s.reduction_cells = j.at("reduction_cells").get<std::vector<int>>();
  }
  return s;
}

json metrics_json(const std::vector<MetricsRow>& rows) {
  json a = json::array();
  for (const auto& r : rows) a.push_back({r.stage, r.epoch, r.split, r.loss, r.accuracy, r.lr, r.params});
  return a;
}

std::vector<MetricsRow> metrics_from(const json& j) {
  std::vector<MetricsRow> rows;
  for (const auto& r : j)
    rows.push_back({r.at(0), r.at(1), r.at(2), r.at(3), r.at(4), r.at(5), r.at(6).get<std::size_t>()});
  return rows;
}

json adam_json(const AdamState& a) { return {{"m", tensors_json(a.m)}, {"v", tensors_json(a.v)}, {"step", a.step}}; }
AdamState adam_from(const json& j) { return {tensors_from(j.at("m")), tensors_from(j.at("v")), j.at("step")}; }

json net_json(const Supernet& net) {
  json bn = json::array();
  for (const auto& b : net.bn) bn.push_back({tensor_json(b.mean), tensor_json(b.var)});
  std::vector<Tensor> w;
  for (const auto& p : net.params) w.push_back(p.value);
  return {{"spec", spec_json(net.spec)},
          {"alpha", array_json(net.arch.alpha)},
          {"beta", array_json(net.arch.beta)},
          {"weights", tensors_json(w)},
          {"bn", bn}};
}

Supernet net_from(const json& j) {
  SearchSpaceSpec spec = spec_from(j.at("spec"));
  try {
    spec.validate();
  } catch (const SpecError& e) {
    throw IntegrityError(std::string("checkpoint search space is invalid: ") + e.what());
  }
  Supernet net = build_supernet(spec, 0);
  auto check = [](const Tensor& want, const Tensor& got, const std::string& what) {
    if (want.shape() != got.shape()) throw IntegrityError("checkpoint " + what + " has the wrong shape");
  };
  const auto alpha = array_from<kNumCellKinds>(j.at("alpha"));
  const auto beta = array_from<kNumCellKinds>(j.at("beta"));
  for (int k = 0; k < kNumCellKinds; ++k) {
    check(net.arch.alpha[k], alpha[k], "alpha");
    check(net.arch.beta[k], beta[k], "beta");
  }
  net.arch.alpha = alpha;
  net.arch.beta = beta;
  const auto w = tensors_from(j.at("weights"));
  if (w.size() != net.params.size()) throw IntegrityError("checkpoint weight count does not match the search space");
  for (std::size_t i = 0; i < w.size(); ++i) {
    check(net.params[i].value, w[i], "weight " + net.params[i].name);
    net.params[i].value = w[i];
  }
  const auto& bn = j.at("bn");
  if (bn.size() != net.bn.size()) throw IntegrityError("checkpoint batch-norm count does not match the search space");
  for (std::size_t i = 0; i < net.bn.size(); ++i) {
    Tensor m = tensor_from(bn[i].at(0)), v = tensor_from(bn[i].at(1));
    check(net.bn[i].mean, m, "batch-norm statistics");
    check(net.bn[i].var, v, "batch-norm statistics");
    net.bn[i].mean = m;
    net.bn[i].var = v;
  }
  return net;
}

json payload(const Checkpoint& c) {
  json j;
  j["stage"] = c.stage;
  j["config"] = c.config;
  j["net"] = net_json(c.net);
  j["train"] = {{"epoch", c.train.epoch},
                {"arch_iter", c.train.arch_iter},
                {"arch_steps", c.train.arch_steps},
                {"velocity", tensors_json(c.train.w_opt.velocity)},
                {"arch_opt", adam_json(c.train.arch_opt)},
                {"rng", c.train.rng_state},
                {"metrics", metrics_json(c.train.metrics)}};
  if (c.masks) {
    j["masks"] = {{"alpha", array_json(c.masks->alpha)},
                  {"beta", array_json(c.masks->beta)},
                  {"w", tensors_json(c.masks->w)},
                  {"tau", c.masks->tau}};
  }
  j["mask_state"] = {{"epoch", c.mask_state.epoch},
                     {"w_opt", adam_json(c.mask_state.w_opt)},
                     {"arch_opt", adam_json(c.mask_state.arch_opt)},
                     {"rng", c.mask_state.rng_state},
                     {"metrics", metrics_json(c.mask_state.metrics)},
                     {"degenerate", c.mask_state.degenerate}};
  if (c.final_masks) {
    j["final_masks"] = {{"alpha", array_json(c.final_masks->alpha)},
                        {"beta", array_json(c.final_masks->beta)},
                        {"w", tensors_json(c.final_masks->w)}};
  }
  j["finetune_state"] = {{"epoch", c.finetune_state.epoch},
                         {"velocity", tensors_json(c.finetune_state.opt.velocity)},
                         {"rng", c.finetune_state.rng_state},
                         {"metrics", metrics_json(c.finetune_state.metrics)},
                         {"epochs_to_target", c.finetune_state.epochs_to_target}};
  return j;
}

Checkpoint from_payload(const json& j) {
  Checkpoint c;
  c.stage = j.at("stage");
  if (c.stage != "supernet" && c.stage != "masks" && c.stage != "final")
    throw IntegrityError("checkpoint has unknown stage tag '" + c.stage + "'");
  c.config = j.at("config");
  c.net = net_from(j.at("net"));
  const auto& t = j.at("train");
  c.train.epoch = t.at("epoch");
  c.train.arch_iter = t.at("arch_iter");
  c.train.arch_steps = t.at("arch_steps");
  c.train.w_opt.velocity = tensors_from(t.at("velocity"));
  c.train.arch_opt = adam_from(t.at("arch_opt"));
  c.train.rng_state = t.at("rng");
  c.train.metrics = metrics_from(t.at("metrics"));
  if (j.contains("masks")) {
    const auto& m = j.at("masks");
    HierMasks h;
    h.alpha = array_from<kNumCellKinds>(m.at("alpha"));
    h.beta = array_from<kNumCellKinds>(m.at("beta"));
    h.w = tensors_from(m.at("w"));
    h.tau = m.at("tau");
    check_mask_shapes(c.net, h.binary());
    c.masks = std::move(h);
  }
  const auto& ms = j.at("mask_state");
  c.mask_state.epoch = ms.at("epoch");
  c.mask_state.w_opt = adam_from(ms.at("w_opt"));
  c.mask_state.arch_opt = adam_from(ms.at("arch_opt"));
  c.mask_state.rng_state = ms.at("rng");
  c.mask_state.metrics = metrics_from(ms.at("metrics"));
  c.mask_state.degenerate = ms.at("degenerate");
  if (j.contains("final_masks")) {
    const auto& m = j.at("final_masks");
    BinaryMasks b;
    b.alpha = array_from<kNumCellKinds>(m.at("alpha"));
    b.beta = array_from<kNumCellKinds>(m.at("beta"));
    b.w = tensors_from(m.at("w"));
    check_mask_shapes(c.net, b);
    c.final_masks = std::move(b);
  }
  const auto& fs = j.at("finetune_state");
  c.finetune_state.epoch = fs.at("epoch");
  c.finetune_state.opt.velocity = tensors_from(fs.at("velocity"));
  c.finetune_state.rng_state = fs.at("rng");
  c.finetune_state.metrics = metrics_from(fs.at("metrics"));
  c.finetune_state.epochs_to_target = fs.at("epochs_to_target");
  return c;
}

template <typename T>
void put(std::vector<std::uint8_t>& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

template <typename T>
T get(std::span<const std::uint8_t> b, std::size_t at) {
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(b[at + i]) << (8 * i);
  return v;
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c) {
  const std::vector<std::uint8_t> body = json::to_cbor(payload(c));
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint64_t>(out, body.size());
  put<std::uint64_t>(out, fnv1a(body));
  out.insert(out.end(), body.begin(), body.end());
  return out;
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("not a checkpoint (bad magic)", 0);
  if (bytes.size() < kHeader) throw IntegrityError("checkpoint header is truncated");
  const auto version = get<std::uint32_t>(bytes, 4);
  if (version != kCheckpointVersion) {
    throw VersionError("checkpoint format version " + std::to_string(version) + " is not supported (expected " +
                       std::to_string(kCheckpointVersion) + ")");
  }
  const auto len = get<std::uint64_t>(bytes, 8);
  const auto sum = get<std::uint64_t>(bytes, 16);
  if (bytes.size() - kHeader != len) {
    throw IntegrityError("checkpoint payload is " + std::to_string(bytes.size() - kHeader) + " bytes, header says " +
                         std::to_string(len));
  }
  const auto body = bytes.subspan(kHeader);
  if (fnv1a(body) != sum) throw IntegrityError("checkpoint checksum mismatch");
  try {
    return from_payload(json::from_cbor(body.begin(), body.end()));
  } catch (const json::exception& e) {
    throw IntegrityError(std::string("checkpoint content is malformed: ") + e.what());
  } catch (const ShapeError& e) {
    throw IntegrityError(std::string("checkpoint masks do not fit the network: ") + e.what());
  }
}

void write_file(const std::filesystem::path& path, std::string_view contents) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw PathError("cannot open " + path.string() + " for writing");
  f.write(contents.data(), static_cast<std::streamsize>(contents.size()));
  if (!f) throw PathError("failed writing " + path.string());
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw PathError("cannot open " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(c);
  auto tmp = path;
  tmp += ".tmp";
  write_file(tmp, std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw PathError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const std::string s = read_file(path);
  return decode_checkpoint(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

namespace {

std::string g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string metrics_csv(const std::vector<MetricsRow>& rows) {
  std::string out = std::string(kMetricsHeader) + "\n";
  for (const auto& r : rows) {
    out += r.stage + "," + std::to_string(r.epoch) + "," + r.split + "," + g17(r.loss) + "," + g17(r.accuracy) + "," +
           g17(r.lr) + "," + std::to_string(r.params) + "\n";
  }
  return out;
}

void write_metrics_csv(const std::vector<MetricsRow>& rows, const std::filesystem::path& path) {
  write_file(path, metrics_csv(rows));
}

std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path) {
  std::stringstream in(read_file(path));
  std::string line;
  std::getline(in, line);
  if (line != kMetricsHeader) throw FormatError("unexpected metrics CSV header in " + path.string(), 0);
  std::vector<MetricsRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string f[7];
    for (auto& x : f) std::getline(ss, x, ',');
    rows.push_back({f[0], std::stoi(f[1]), f[2], std::stod(f[3]), std::stod(f[4]), std::stod(f[5]),
                    static_cast<std::size_t>(std::stoull(f[6]))});
  }
  return rows;
}

}  // namespace hmnas
