#include "tvc/io.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>

static_assert(std::endian::native == std::endian::little,
              "payloads are little-endian; big-endian hosts are not supported");

namespace tvc {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kChainMagic[8] = {'T', 'V', 'C', 'B', 'I', 'N', '1', '\n'};

std::uint64_t fnv1a(const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = 1469598103934665603ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

void write_doubles(const std::string& path, const double* data, std::size_t n) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot open for writing: " + path);
  f.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(double)));
  if (!f) throw DataError("short write: " + path);
}

std::vector<double> read_doubles(const std::string& path, std::size_t expected) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw DataError("missing file: " + path);
  const auto bytes = static_cast<std::size_t>(f.tellg());
  if (bytes != expected * sizeof(double))
    throw DataError("size mismatch for " + path + ": " + std::to_string(bytes) + " bytes, expected " +
                    std::to_string(expected * sizeof(double)));
  f.seekg(0);
  std::vector<double> out(expected);
  f.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(bytes));
  if (!f) throw DataError("short read: " + path);
  return out;
}

std::string role_file(const std::string& role, Index i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s_%04d.bin", role.c_str(), static_cast<int>(i));
  return buf;
}

// ---- double-payload serialization helpers

struct Sink {
  std::vector<double> buf;
  void put(double v) { buf.push_back(v); }
  void put(const Eigen::MatrixXd& m) { buf.insert(buf.end(), m.data(), m.data() + m.size()); }
  void put(const Eigen::VectorXd& v) { buf.insert(buf.end(), v.data(), v.data() + v.size()); }
};

struct Source {
  const double* p = nullptr;
  std::size_t remaining = 0;
  double get() {
    if (remaining == 0) throw DataError("payload exhausted");
    --remaining;
    return *p++;
  }
  void get(Eigen::MatrixXd& m, Index rows, Index cols) {
    m.resize(rows, cols);
    const std::size_t n = static_cast<std::size_t>(rows * cols);
    if (remaining < n) throw DataError("payload exhausted");
    std::memcpy(m.data(), p, n * sizeof(double));
    p += n;
    remaining -= n;
  }
};

void put_factor(Sink& s, const CPFactorD& f) {
  for (Index d = 0; d < f.order(); ++d) s.put(f.mode(d));
}

CPFactorD get_factor(Source& s, const Shape& shape, Index rank) {
  CPFactorD f(shape, rank);
  for (Index d = 0; d < f.order(); ++d)
    s.get(f.mode(d), shape[static_cast<std::size_t>(d)], rank);
  return f;
}

void put_hypers(Sink& s, const MarginHypers& h) {
  s.put(h.w);
  s.put(h.alpha);
  s.put(h.lambda);
}

MarginHypers get_hypers(Source& s, Index dims, Index rank) {
  MarginHypers h(dims, rank);
  s.get(h.w, dims, rank);
  s.get(h.alpha, dims, rank);
  s.get(h.lambda, dims, rank);
  return h;
}

void put_state(Sink& s, const ModelState& st) {
  put_factor(s, st.intercept);
  put_factor(s, st.slope);
  for (const auto& f : st.covariate) put_factor(s, f);
  put_hypers(s, st.intercept_hyp);
  put_hypers(s, st.slope_hyp);
  for (const auto& h : st.covariate_hyp) put_hypers(s, h);
  s.put(st.tau_intercept);
  s.put(st.tau_slope);
  for (double t : st.tau_covariate) s.put(t);
  s.put(st.gp_var);
  s.put(st.gp_scale);
  s.put(st.noise_var);
  s.put(static_cast<double>(st.atoms.rows()));
  s.put(static_cast<double>(st.atoms.cols()));
  s.put(st.atoms);
}

ModelState get_state(Source& s, const Shape& shape, Index rank, Index n_cov) {
  const Index dims = static_cast<Index>(shape.size());
  ModelState st;
  st.intercept = get_factor(s, shape, rank);
  st.slope = get_factor(s, shape, rank);
  st.covariate.clear();
  for (Index c = 0; c < n_cov; ++c) st.covariate.push_back(get_factor(s, shape, rank));
  st.intercept_hyp = get_hypers(s, dims, rank);
  st.slope_hyp = get_hypers(s, dims, rank);
  st.covariate_hyp.clear();
  for (Index c = 0; c < n_cov; ++c) st.covariate_hyp.push_back(get_hypers(s, dims, rank));
  st.tau_intercept = s.get();
  st.tau_slope = s.get();
  st.tau_covariate.assign(static_cast<std::size_t>(n_cov), 0.0);
  for (Index c = 0; c < n_cov; ++c) st.tau_covariate[static_cast<std::size_t>(c)] = s.get();
  st.gp_var = s.get();
  st.gp_scale = s.get();
  st.noise_var = s.get();
  const Index rows = static_cast<Index>(s.get());
  const Index cols = static_cast<Index>(s.get());
  s.get(st.atoms, rows, cols);
  return st;
}

json chain_header(const Chain& chain) {
  json h;
  h["version"] = kChainFormatVersion;
  h["config"] = config_to_json(chain.config);
  h["shape"] = chain.shape;
  h["seed"] = chain.seed;
  h["n_states"] = chain.states.size();
  json iters = json::array();
  for (const auto& s : chain.states) iters.push_back(s.iteration);
  h["state_iterations"] = std::move(iters);
  h["trace_voxels"] = chain.trace_voxels;
  h["trace_rows"] = chain.traces.rows();
  json acc = json::array();
  for (const auto& a : chain.alpha_accept) acc.push_back({a.proposals, a.accepts});
  h["alpha_accept"] = std::move(acc);
  h["phi2_accept"] = {chain.phi2_accept.proposals, chain.phi2_accept.accepts};
  h["sigma2_phi2_final"] = chain.sigma2_phi2_final;
  h["atom_fallbacks"] = chain.atom_fallbacks;
  h["n_iter_seconds"] = chain.iter_seconds.size();
  return h;
}

void chain_payload(const Chain& chain, Sink& sink) {
  for (const auto& s : chain.states) put_state(sink, s.state);
  sink.put(chain.traces);
  for (double v : chain.iter_seconds) sink.put(v);
}

Chain chain_from(const json& h, Source& src) {
  Chain chain;
  if (h.at("version").get<int>() != kChainFormatVersion)
    throw DataError("chain format version " + h.at("version").dump() + "; this build reads version " +
                    std::to_string(kChainFormatVersion));
  chain.config = config_from_json(h.at("config"));
  chain.shape = h.at("shape").get<Shape>();
  chain.seed = h.at("seed").get<std::uint64_t>();
  chain.trace_voxels = h.at("trace_voxels").get<std::vector<Index>>();

  const auto iters = h.at("state_iterations").get<std::vector<Index>>();
  const Index n_cov = chain.config.covariate_count;
  for (Index it : iters) {
    ChainSnapshot snap;
    snap.iteration = it;
    snap.state = get_state(src, chain.shape, chain.config.rank, n_cov);
    chain.states.push_back(std::move(snap));
  }
  const Index rows = h.at("trace_rows").get<Index>();
  src.get(chain.traces, rows, static_cast<Index>(chain.trace_voxels.size()));
  const auto nsec = h.at("n_iter_seconds").get<std::size_t>();
  chain.iter_seconds.resize(nsec);
  for (auto& v : chain.iter_seconds) v = src.get();

  for (const auto& a : h.at("alpha_accept")) {
    AcceptCounter c;
    c.proposals = a.at(0).get<std::uint64_t>();
    c.accepts = a.at(1).get<std::uint64_t>();
    chain.alpha_accept.push_back(c);
  }
  chain.phi2_accept.proposals = h.at("phi2_accept").at(0).get<std::uint64_t>();
  chain.phi2_accept.accepts = h.at("phi2_accept").at(1).get<std::uint64_t>();
  chain.sigma2_phi2_final = h.at("sigma2_phi2_final").get<double>();
  chain.atom_fallbacks = h.at("atom_fallbacks").get<std::uint64_t>();
  return chain;
}

void write_container(const std::string& path, const json& header, const std::vector<double>& payload) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot open for writing: " + path);
  const std::string htext = header.dump();
  const std::uint64_t hlen = htext.size();
  const std::uint64_t plen = payload.size();
  f.write(kChainMagic, 8);
  f.write(reinterpret_cast<const char*>(&hlen), 8);
  f.write(htext.data(), static_cast<std::streamsize>(hlen));
  f.write(reinterpret_cast<const char*>(&plen), 8);
  f.write(reinterpret_cast<const char*>(payload.data()),
          static_cast<std::streamsize>(plen * sizeof(double)));
  const std::uint64_t digest = fnv1a(payload.data(), plen * sizeof(double));
  f.write(reinterpret_cast<const char*>(&digest), 8);
  if (!f) throw DataError("short write: " + path);
}

std::pair<json, std::vector<double>> read_container(const std::string& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw DataError("missing file: " + path);
  const auto total = static_cast<std::uint64_t>(f.tellg());
  f.seekg(0);
  char magic[8];
  std::uint64_t hlen = 0, plen = 0, digest = 0;
  if (total < 24) throw DataError("truncated container: " + path);
  f.read(magic, 8);
  if (std::memcmp(magic, kChainMagic, 8) != 0) throw DataError("bad container magic: " + path);
  f.read(reinterpret_cast<char*>(&hlen), 8);
  if (total < 24 + hlen + 8) throw DataError("truncated container: " + path);
  std::string htext(hlen, '\0');
  f.read(htext.data(), static_cast<std::streamsize>(hlen));
  f.read(reinterpret_cast<char*>(&plen), 8);
  if (total != 8 + 8 + hlen + 8 + plen * sizeof(double) + 8)
    throw DataError("container length mismatch (corrupt or truncated): " + path);
  std::vector<double> payload(plen);
  f.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(plen * sizeof(double)));
  f.read(reinterpret_cast<char*>(&digest), 8);
  if (!f) throw DataError("short read: " + path);
  if (digest != fnv1a(payload.data(), plen * sizeof(double)))
    throw DataError("payload integrity check failed: " + path);
  json header = json::parse(htext);
  return {std::move(header), std::move(payload)};
}

}  // namespace

void save_dataset(const std::string& dir, const DatasetBundle& bundle) {
  const Dataset& ds = bundle.data;
  fs::create_directories(dir);
  json man;
  man["kind"] = "tvc-dataset";
  man["format_version"] = kDatasetFormatVersion;
  man["shape"] = ds.shape;
  man["n_subjects"] = ds.n_subjects();
  man["element_type"] = "float64";
  man["byte_order"] = "little";
  man["vector_order"] = "mode1-fastest";
  man["train"] = ds.train_idx;
  man["test"] = ds.test_idx;
  if (!bundle.generation.is_null()) man["generation"] = bundle.generation;

  const Index v = ds.n_voxels();
  json files;
  json xs = json::array(), ys = json::array(), ms = json::array(), es = json::array();
  for (Index i = 0; i < ds.n_subjects(); ++i) {
    const std::string xf = role_file("x", i), yf = role_file("y", i);
    write_doubles(dir + "/" + xf, ds.x[static_cast<std::size_t>(i)].data(), static_cast<std::size_t>(v));
    write_doubles(dir + "/" + yf, ds.y[static_cast<std::size_t>(i)].data(), static_cast<std::size_t>(v));
    xs.push_back(xf);
    ys.push_back(yf);
    if (!ds.subject_mask.empty()) {
      const std::string mf = role_file("mask", i);
      std::vector<double> m(static_cast<std::size_t>(v));
      for (Index k = 0; k < v; ++k) m[static_cast<std::size_t>(k)] = ds.subject_mask[static_cast<std::size_t>(i)][k];
      write_doubles(dir + "/" + mf, m.data(), m.size());
      ms.push_back(mf);
    }
    if (!bundle.effect_true.empty()) {
      const std::string ef = role_file("effect_true", i);
      write_doubles(dir + "/" + ef, bundle.effect_true[static_cast<std::size_t>(i)].data(), static_cast<std::size_t>(v));
      es.push_back(ef);
    }
  }
  files["x"] = std::move(xs);
  files["y"] = std::move(ys);
  if (!ms.empty()) files["mask"] = std::move(ms);
  if (!es.empty()) files["effect_true"] = std::move(es);
  if (ds.z.cols() > 0) {
    write_doubles(dir + "/z.bin", ds.z.data(), static_cast<std::size_t>(ds.z.size()));
    files["z"] = "z.bin";
    man["n_covariates"] = ds.z.cols();
  }
  if (bundle.intercept_true.size() > 0) {
    write_doubles(dir + "/intercept_true.bin", bundle.intercept_true.data(),
                  static_cast<std::size_t>(bundle.intercept_true.size()));
    files["intercept_true"] = "intercept_true.bin";
  }
  if (bundle.slope_true.size() > 0) {
    write_doubles(dir + "/slope_true.bin", bundle.slope_true.data(),
                  static_cast<std::size_t>(bundle.slope_true.size()));
    files["slope_true"] = "slope_true.bin";
  }
  man["files"] = std::move(files);

  std::ofstream mf(dir + "/manifest.json");
  if (!mf) throw DataError("cannot write manifest in " + dir);
  mf << man.dump(2) << "\n";
}

DatasetBundle load_dataset(const std::string& dir) {
  std::ifstream mf(dir + "/manifest.json");
  if (!mf) throw DataError("missing manifest: " + dir + "/manifest.json");
  json man = json::parse(mf);
  if (man.value("kind", "") != "tvc-dataset") throw DataError("not a dataset manifest: " + dir);
  if (man.at("format_version").get<int>() != kDatasetFormatVersion)
    throw DataError("dataset format version " + man.at("format_version").dump() +
                    "; this build reads version " + std::to_string(kDatasetFormatVersion));

  DatasetBundle out;
  Dataset& ds = out.data;
  ds.shape = man.at("shape").get<Shape>();
  const Index v = shape_size(ds.shape);
  const Index n = man.at("n_subjects").get<Index>();
  const json& files = man.at("files");

  auto load_tensor = [&](const std::string& name) {
    std::vector<double> raw = read_doubles(dir + "/" + name, static_cast<std::size_t>(v));
    return DenseTensorD(ds.shape, std::move(raw));
  };

  for (Index i = 0; i < n; ++i) {
    ds.x.push_back(load_tensor(files.at("x").at(static_cast<std::size_t>(i)).get<std::string>()));
    ds.y.push_back(load_tensor(files.at("y").at(static_cast<std::size_t>(i)).get<std::string>()));
  }
  if (files.contains("mask")) {
    for (Index i = 0; i < n; ++i) {
      std::vector<double> raw = read_doubles(
          dir + "/" + files.at("mask").at(static_cast<std::size_t>(i)).get<std::string>(),
          static_cast<std::size_t>(v));
      DenseTensor<std::uint8_t> m(ds.shape);
      for (Index k = 0; k < v; ++k) {
        const double x = raw[static_cast<std::size_t>(k)];
        if (x != 0.0 && x != 1.0) throw DataError("mask entries must be 0 or 1 in " + dir);
        m[k] = static_cast<std::uint8_t>(x);
      }
      ds.subject_mask.push_back(std::move(m));
    }
  }
  if (files.contains("z")) {
    const Index s = man.at("n_covariates").get<Index>();
    std::vector<double> raw = read_doubles(dir + "/z.bin", static_cast<std::size_t>(n * s));
    ds.z = Eigen::Map<Eigen::MatrixXd>(raw.data(), n, s);
  } else {
    ds.z.resize(n, 0);
  }
  if (files.contains("effect_true"))
    for (Index i = 0; i < n; ++i)
      out.effect_true.push_back(
          load_tensor(files.at("effect_true").at(static_cast<std::size_t>(i)).get<std::string>()));
  if (files.contains("intercept_true")) out.intercept_true = load_tensor("intercept_true.bin");
  if (files.contains("slope_true")) out.slope_true = load_tensor("slope_true.bin");

  ds.train_idx = man.at("train").get<std::vector<Index>>();
  ds.test_idx = man.at("test").get<std::vector<Index>>();
  if (man.contains("generation")) out.generation = man.at("generation");

  ds.finalize();
  return out;
}

void save_chain(const std::string& path, const Chain& chain) {
  json h = chain_header(chain);
  h["container"] = "chain";
  Sink sink;
  chain_payload(chain, sink);
  write_container(path, h, sink.buf);
}

Chain load_chain(const std::string& path) {
  auto [h, payload] = read_container(path);
  if (h.value("container", "") != "chain") throw DataError("not a chain container: " + path);
  Source src{payload.data(), payload.size()};
  Chain chain = chain_from(h, src);
  if (src.remaining != 0) throw DataError("trailing payload in " + path);
  return chain;
}

void save_checkpoint(const std::string& path, const SamplerCheckpoint& ckpt) {
  json h = chain_header(ckpt.partial);
  h["container"] = "checkpoint";
  h["next_iteration"] = ckpt.next_iteration;
  h["sigma2_phi2"] = ckpt.sigma2_phi2;
  Sink sink;
  put_state(sink, ckpt.state);
  chain_payload(ckpt.partial, sink);
  write_container(path, h, sink.buf);
}

SamplerCheckpoint load_checkpoint(const std::string& path) {
  auto [h, payload] = read_container(path);
  if (h.value("container", "") != "checkpoint") throw DataError("not a checkpoint container: " + path);
  SamplerCheckpoint ckpt;
  ckpt.config = config_from_json(h.at("config"));
  ckpt.seed = h.at("seed").get<std::uint64_t>();
  ckpt.next_iteration = h.at("next_iteration").get<Index>();
  ckpt.sigma2_phi2 = h.at("sigma2_phi2").get<double>();
  Source src{payload.data(), payload.size()};
  const Shape shape = h.at("shape").get<Shape>();
  ckpt.state = get_state(src, shape, ckpt.config.rank, ckpt.config.covariate_count);
  ckpt.partial = chain_from(h, src);
  if (src.remaining != 0) throw DataError("trailing payload in " + path);
  return ckpt;
}

json config_to_json(const ModelConfig& c) {
  json j;
  j["rank"] = c.rank;
  j["patch_size"] = c.patch_size;
  j["a_tau"] = c.a_tau; j["b_tau"] = c.b_tau;
  j["a_lambda"] = c.a_lambda; j["b_lambda"] = c.b_lambda;
  j["a_alpha"] = c.a_alpha; j["b_alpha"] = c.b_alpha;
  j["a_phi1"] = c.a_phi1; j["b_phi1"] = c.b_phi1;
  j["a_e"] = c.a_e; j["b_e"] = c.b_e;
  j["iterations"] = c.iterations;
  j["burnin_fraction"] = c.burnin_fraction;
  j["thinning"] = c.thinning;
  j["sigma2_alpha"] = c.sigma2_alpha;
  j["sigma2_phi2"] = c.sigma2_phi2;
  j["mask_threshold"] = c.mask_threshold;
  j["covariate_count"] = c.covariate_count;
  j["threads"] = c.threads;
  j["trace_subject"] = c.trace_subject;
  j["max_trace_voxels"] = c.max_trace_voxels;
  j["retain_atoms"] = c.retain_atoms;
  return j;
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.rank = j.value("rank", c.rank);
  c.patch_size = j.value("patch_size", c.patch_size);
  c.a_tau = j.value("a_tau", c.a_tau); c.b_tau = j.value("b_tau", c.b_tau);
  c.a_lambda = j.value("a_lambda", c.a_lambda); c.b_lambda = j.value("b_lambda", c.b_lambda);
  c.a_alpha = j.value("a_alpha", c.a_alpha); c.b_alpha = j.value("b_alpha", c.b_alpha);
  c.a_phi1 = j.value("a_phi1", c.a_phi1); c.b_phi1 = j.value("b_phi1", c.b_phi1);
  c.a_e = j.value("a_e", c.a_e); c.b_e = j.value("b_e", c.b_e);
  c.iterations = j.value("iterations", c.iterations);
  c.burnin_fraction = j.value("burnin_fraction", c.burnin_fraction);
  c.thinning = j.value("thinning", c.thinning);
  c.sigma2_alpha = j.value("sigma2_alpha", c.sigma2_alpha);
  c.sigma2_phi2 = j.value("sigma2_phi2", c.sigma2_phi2);
  c.mask_threshold = j.value("mask_threshold", c.mask_threshold);
  c.covariate_count = j.value("covariate_count", c.covariate_count);
  c.threads = j.value("threads", c.threads);
  c.trace_subject = j.value("trace_subject", c.trace_subject);
  c.max_trace_voxels = j.value("max_trace_voxels", c.max_trace_voxels);
  c.retain_atoms = j.value("retain_atoms", c.retain_atoms);
  c.validate();
  return c;
}

ModelConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("missing config file: " + path);
  return config_from_json(json::parse(f));
}

void save_config(const std::string& path, const ModelConfig& cfg) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write config file: " + path);
  f << config_to_json(cfg).dump(2) << "\n";
}

void save_prediction(const std::string& dir, const PredictionResult& pred,
                     const std::vector<Index>& test_subjects, const Shape& shape) {
  fs::create_directories(dir);
  json man;
  man["kind"] = "tvc-prediction";
  man["format_version"] = kDatasetFormatVersion;
  man["shape"] = shape;
  man["test_subjects"] = test_subjects;
  man["kriging_fallbacks"] = pred.kriging_fallbacks;
  json files;
  auto dump = [&](const char* role, const std::vector<DenseTensorD>& ts) {
    json lst = json::array();
    for (std::size_t i = 0; i < ts.size(); ++i) {
      const std::string name = role_file(role, static_cast<Index>(i));
      write_doubles(dir + "/" + name, ts[i].data(), static_cast<std::size_t>(ts[i].size()));
      lst.push_back(name);
    }
    files[role] = std::move(lst);
  };
  dump("mean", pred.mean);
  dump("variance", pred.variance);
  dump("lower", pred.lower);
  dump("upper", pred.upper);
  man["files"] = std::move(files);
  std::ofstream mf(dir + "/manifest.json");
  if (!mf) throw DataError("cannot write manifest in " + dir);
  mf << man.dump(2) << "\n";
}

void write_csv(const std::string& path, const std::vector<std::string>& header,
               const std::vector<std::vector<double>>& rows) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write csv: " + path);
  for (std::size_t i = 0; i < header.size(); ++i) f << (i ? "," : "") << header[i];
  f << "\n";
  f << std::setprecision(12);
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) f << (i ? "," : "") << row[i];
    f << "\n";
  }
}

}  // namespace tvc
