#include "ocbm/ingest.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace ocbm::io {

static_assert(std::endian::native == std::endian::little, "matrix codec assumes a little-endian host");

namespace {

template <typename T>
void put(std::vector<std::uint8_t>& out, T v) {
  std::uint8_t buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.insert(out.end(), buf, buf + sizeof(T));
}

template <typename T>
T get(std::span<const std::uint8_t> bytes, std::size_t offset) {
  T v;
  std::memcpy(&v, bytes.data() + offset, sizeof(T));
  return v;
}

[[noreturn]] void io_fail(const fs::path& p, const std::string& what) {
  fail(ErrorKind::IoError, p.string() + ": " + what);
}

std::string trim(std::string s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == '\n' || s.back() == ' ' || s.back() == '\t')) s.pop_back();
  std::size_t i = 0;
  while (i < s.size() && (s[i] == ' ' || s[i] == '\t')) ++i;
  return s.substr(i);
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(line);
  while (std::getline(is, cur, sep)) out.push_back(cur);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

double parse_double(const std::string& s, const std::string& where) {
  double v = 0;
  const auto t = trim(s);
  auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc() || p != t.data() + t.size()) {
    // from_chars rejects "inf"/"nan" spellings with a sign; handle those as non-finite
    if (t == "nan" || t == "-nan" || t == "inf" || t == "-inf") {
      fail(ErrorKind::NonFiniteValue, where + ": '" + t + "'");
    }
    fail(ErrorKind::InvalidArgument, where + ": cannot parse number '" + t + "'");
  }
  if (!std::isfinite(v)) fail(ErrorKind::NonFiniteValue, where + ": '" + t + "'");
  return v;
}

long long parse_int(const std::string& s, const std::string& where) {
  long long v = 0;
  const auto t = trim(s);
  auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc() || p != t.data() + t.size())
    fail(ErrorKind::InvalidArgument, where + ": cannot parse integer '" + t + "'");
  return v;
}

std::vector<std::string> read_lines(const fs::path& path) {
  std::istringstream is(read_text(path));
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

}  // namespace

std::string format_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, p);
}

RowMatrixXd quantize(const RowMatrixXd& m) { return m.cast<float>().cast<double>(); }

std::vector<std::uint8_t> encode_matrix(const RowMatrixXd& m) {
  require_finite(m, "matrix to encode");
  std::vector<std::uint8_t> out;
  out.reserve(kHeaderBytes + static_cast<std::size_t>(m.size()) * 4);
  out.insert(out.end(), kMagic, kMagic + 4);
  put<std::uint16_t>(out, kFormatVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(m.rows()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(m.cols()));
  for (Index r = 0; r < m.rows(); ++r)
    for (Index c = 0; c < m.cols(); ++c) {
      const auto f = static_cast<float>(m(r, c));
      if (!std::isfinite(f)) fail(ErrorKind::NonFiniteValue, "value overflows 32-bit storage");
      put<float>(out, f);
    }
  return out;
}

RowMatrixXd decode_matrix(std::span<const std::uint8_t> bytes, const std::string& source) {
  if (bytes.size() < kHeaderBytes)
    fail(ErrorKind::TruncatedPayload, source + ": header needs " + std::to_string(kHeaderBytes) + " bytes, got " +
                                          std::to_string(bytes.size()));
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) fail(ErrorKind::BadMagic, source + ": bad magic at byte offset 0");
  const auto version = get<std::uint16_t>(bytes, 4);
  if (version != kFormatVersion)
    fail(ErrorKind::BadMagic, source + ": unsupported format version " + std::to_string(version) +
                                  " at byte offset 4");
  const auto rows = get<std::uint32_t>(bytes, 6);
  const auto dims = get<std::uint32_t>(bytes, 10);
  const std::uint64_t expected = std::uint64_t{rows} * dims * 4;
  const std::uint64_t actual = bytes.size() - kHeaderBytes;
  if (actual != expected) {
    fail(ErrorKind::TruncatedPayload, source + ": expected " + std::to_string(expected) + " payload bytes, got " +
                                          std::to_string(actual) + " (payload starts at byte offset " +
                                          std::to_string(kHeaderBytes) + ")");
  }
  RowMatrixXd m(rows, dims);
  std::size_t off = kHeaderBytes;
  for (Index r = 0; r < m.rows(); ++r)
    for (Index c = 0; c < m.cols(); ++c, off += 4) {
      const float f = get<float>(bytes, off);
      if (!std::isfinite(f)) {
        Error e(ErrorKind::NonFiniteValue, source + ": non-finite value at (" + std::to_string(r) + ", " +
                                               std::to_string(c) + "), byte offset " + std::to_string(off));
        e.row = r;
        e.col = c;
        throw e;
      }
      m(r, c) = f;
    }
  return m;
}

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) io_fail(path, "cannot open for reading");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_bytes(const fs::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) io_fail(path, "cannot open for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) io_fail(path, "write failed");
}

void write_text(const fs::path& path, const std::string& text) {
  write_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string read_text(const fs::path& path) {
  const auto b = read_bytes(path);
  return std::string(b.begin(), b.end());
}

void write_matrix(const fs::path& path, const RowMatrixXd& m) { write_bytes(path, encode_matrix(m)); }

RowMatrixXd read_matrix(const fs::path& path) { return decode_matrix(read_bytes(path), path.string()); }

void write_labels(const fs::path& path, std::span<const Index> labels) {
  std::string s = "row,label\n";
  for (std::size_t i = 0; i < labels.size(); ++i) s += std::to_string(i) + "," + std::to_string(labels[i]) + "\n";
  write_text(path, s);
}

std::vector<Index> read_labels(const fs::path& path) {
  const auto lines = read_lines(path);
  if (lines.empty() || trim(lines[0]) != "row,label") fail(ErrorKind::InvalidArgument, path.string() + ": bad header");
  std::vector<Index> out;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (trim(lines[i]).empty()) continue;
    const auto cols = split(lines[i], ',');
    const auto where = path.string() + " line " + std::to_string(i + 1);
    if (cols.size() != 2) fail(ErrorKind::InvalidArgument, where + ": expected 2 columns");
    if (parse_int(cols[0], where) != static_cast<long long>(out.size()))
      fail(ErrorKind::InvalidArgument, where + ": rows must be listed in order");
    out.push_back(static_cast<Index>(parse_int(cols[1], where)));
  }
  return out;
}

void write_class_names(const fs::path& path, const std::vector<std::string>& names) {
  std::string s;
  for (const auto& n : names) {
    if (n.find('\n') != std::string::npos) fail(ErrorKind::InvalidArgument, "class name contains a newline");
    s += n + "\n";
  }
  write_text(path, s);
}

std::vector<std::string> read_class_names(const fs::path& path) {
  std::vector<std::string> out;
  for (auto& l : read_lines(path))
    if (!l.empty()) out.push_back(l);
  return out;
}

void write_vector_csv(const fs::path& path, const std::string& column, const VectorXd& v) {
  std::string s = column + "\n";
  for (Index i = 0; i < v.size(); ++i) s += format_double(v[i]) + "\n";
  write_text(path, s);
}

VectorXd read_vector_csv(const fs::path& path) {
  const auto lines = read_lines(path);
  if (lines.empty()) fail(ErrorKind::InvalidArgument, path.string() + ": empty file");
  std::vector<double> vals;
  for (std::size_t i = 1; i < lines.size(); ++i)
    if (!trim(lines[i]).empty())
      vals.push_back(parse_double(lines[i], path.string() + " line " + std::to_string(i + 1)));
  return Eigen::Map<const VectorXd>(vals.data(), static_cast<Index>(vals.size()));
}

ConceptSet load_concepts(const fs::path& manifest, std::optional<Normalization> mode) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text(manifest));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::InvalidArgument, manifest.string() + ": " + e.what());
  }
  if (!j.is_object() || !j.contains("names") || !j.contains("matrix_file"))
    fail(ErrorKind::InvalidArgument, manifest.string() + ": manifest needs 'names' and 'matrix_file'");
  const auto names = j.at("names").get<std::vector<std::string>>();
  const fs::path matrix = manifest.parent_path() / j.at("matrix_file").get<std::string>();
  if (!fs::exists(matrix)) fail(ErrorKind::IoError, manifest.string() + ": missing matrix file " + matrix.string());
  auto m = read_matrix(matrix);
  if (static_cast<Index>(names.size()) != m.rows())
    fail(ErrorKind::InconsistentDims, manifest.string() + ": " + std::to_string(names.size()) + " names but " +
                                          std::to_string(m.rows()) + " matrix rows");
  if (j.contains("raw_norms") && j.at("raw_norms").size() != names.size())
    fail(ErrorKind::InconsistentDims, manifest.string() + ": raw_norms length differs from names");
  const bool normalize = j.value("normalize", true);
  const auto resolved = mode.value_or(normalize ? Normalization::Unit : Normalization::Raw);
  return ConceptSet(names, std::move(m), resolved);
}

void write_concepts(const fs::path& dir, const std::string& stem, const ConceptSet& concepts) {
  const std::string matrix_file = stem + ".ocbm";
  write_matrix(dir / matrix_file, concepts.raw().matrix());
  nlohmann::json j;
  j["names"] = concepts.names();
  j["matrix_file"] = matrix_file;
  j["normalize"] = concepts.normalization() == Normalization::Unit;
  std::vector<double> norms(concepts.raw_norms().data(), concepts.raw_norms().data() + concepts.raw_norms().size());
  j["raw_norms"] = norms;
  write_text(dir / (stem + ".json"), j.dump(2) + "\n");
}

const ConceptSet& Bundle::concept_set(const std::string& name) const {
  for (const auto& c : concepts)
    if (c.name == name) return c.concepts;
  fail(ErrorKind::UnknownConcept, "bundle has no concept set '" + name + "'");
}

ClassifierHead load_head(const fs::path& matrix, const std::optional<fs::path>& bias_csv) {
  auto W = read_matrix(matrix);
  std::optional<VectorXd> bias;
  if (bias_csv && fs::exists(*bias_csv)) bias = read_vector_csv(*bias_csv);
  return ClassifierHead(EmbeddingMatrix(std::move(W)), std::move(bias));
}

void write_head(const fs::path& matrix, const fs::path& bias_csv, const ClassifierHead& head) {
  write_matrix(matrix, head.weights().matrix());
  if (head.bias())
    write_vector_csv(bias_csv, "bias", *head.bias());
  else if (fs::exists(bias_csv))
    fs::remove(bias_csv);
}

Bundle load_bundle(const fs::path& dir, std::optional<Normalization> mode) {
  if (!fs::is_directory(dir)) fail(ErrorKind::IoError, dir.string() + ": not a bundle directory");
  const auto names = read_class_names(dir / "class_names.txt");
  const auto labels = read_labels(dir / "labels.csv");
  auto features = read_matrix(dir / "features.ocbm");
  auto reference = read_matrix(dir / "reference.ocbm");
  if (features.rows() != static_cast<Index>(labels.size()))
    fail(ErrorKind::InconsistentDims, "features.ocbm has " + std::to_string(features.rows()) + " rows, labels.csv " +
                                          std::to_string(labels.size()));
  if (reference.rows() != features.rows())
    fail(ErrorKind::InconsistentDims, "reference.ocbm row count differs from features.ocbm");

  Bundle b;
  b.train = LabeledDataset(EmbeddingMatrix(std::move(features)), labels, names);
  b.reference = LabeledDataset(EmbeddingMatrix(std::move(reference)), labels, names);
  b.head = load_head(dir / "head.ocbm", dir / "head_bias.csv");
  if (b.head.num_classes() != static_cast<Index>(names.size()))
    fail(ErrorKind::InconsistentDims, "head.ocbm has " + std::to_string(b.head.num_classes()) + " rows, " +
                                          std::to_string(names.size()) + " classes");
  if (b.head.dims() != b.reference.dims())
    fail(ErrorKind::InconsistentDims, "head.ocbm dims differ from reference.ocbm dims");

  const auto cdir = dir / "concepts";
  if (fs::is_directory(cdir)) {
    std::vector<fs::path> manifests;
    for (const auto& e : fs::directory_iterator(cdir))
      if (e.path().extension() == ".json") manifests.push_back(e.path());
    std::sort(manifests.begin(), manifests.end());
    for (const auto& m : manifests) {
      auto cs = load_concepts(m, mode);
      if (!cs.empty() && cs.dims() != b.head.dims())
        fail(ErrorKind::InconsistentDims, m.string() + ": concept dims differ from head dims");
      b.concepts.push_back({m.stem().string(), std::move(cs)});
    }
  }
  return b;
}

void write_bundle(const fs::path& dir, const Bundle& b) {
  fs::create_directories(dir);
  write_matrix(dir / "features.ocbm", b.train.features().matrix());
  write_matrix(dir / "reference.ocbm", b.reference.features().matrix());
  write_labels(dir / "labels.csv", b.train.labels());
  write_class_names(dir / "class_names.txt", b.train.class_names());
  write_head(dir / "head.ocbm", dir / "head_bias.csv", b.head);
  for (const auto& c : b.concepts) write_concepts(dir / "concepts", c.name, c.concepts);
}

fs::path resolve_manifest(const fs::path& bundle_dir, const std::string& ref) {
  const fs::path p(ref);
  if (fs::exists(p) && fs::is_regular_file(p)) return p;
  const auto in_bundle = bundle_dir / "concepts" / (p.extension() == ".json" ? p : fs::path(ref + ".json"));
  if (fs::exists(in_bundle)) return in_bundle;
  fail(ErrorKind::IoError, "no concept manifest '" + ref + "'");
}

void write_reconstruction(const fs::path& dir, const ReconstructionResult& r,
                          const std::vector<std::string>& class_names) {
  fs::create_directories(dir);
  write_matrix(dir / "alpha.ocbm", r.alpha);
  write_matrix(dir / "residuals.ocbm", r.residuals.matrix());
  nlohmann::json j;
  j["concept_names"] = r.concept_names;
  j["class_names"] = class_names;
  j["per_class_error"] = std::vector<double>(r.per_class_error.data(), r.per_class_error.data() + r.per_class_error.size());
  j["total_error"] = r.total_error;
  j["num_classes"] = r.num_classes();
  j["num_concepts"] = r.num_concepts();
  write_text(dir / "reconstruction.json", j.dump(2) + "\n");
}

ReconstructionResult read_reconstruction(const fs::path& dir) {
  const auto j = nlohmann::json::parse(read_text(dir / "reconstruction.json"));
  ReconstructionResult r;
  r.concept_names = j.at("concept_names").get<std::vector<std::string>>();
  const auto C = j.at("num_classes").get<Index>();
  const auto k = j.at("num_concepts").get<Index>();
  r.alpha = read_matrix(dir / "alpha.ocbm");
  if (r.alpha.rows() != C || r.alpha.cols() != k) fail(ErrorKind::InconsistentDims, "alpha.ocbm shape mismatch");
  r.residuals = EmbeddingMatrix(read_matrix(dir / "residuals.ocbm"));
  const auto errs = j.at("per_class_error").get<std::vector<double>>();
  r.per_class_error = Eigen::Map<const VectorXd>(errs.data(), static_cast<Index>(errs.size()));
  r.total_error = j.at("total_error").get<double>();
  if (static_cast<Index>(r.concept_names.size()) != k || r.residuals.rows() != C || r.per_class_error.size() != C)
    fail(ErrorKind::InconsistentDims, dir.string() + ": reconstruction files disagree");
  return r;
}

nlohmann::json traces_to_json(const std::vector<DiscoveryTrace>& traces, const std::vector<std::string>& class_names) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& t : traces) {
    nlohmann::json jt;
    jt["class_index"] = t.class_index;
    if (static_cast<std::size_t>(t.class_index) < class_names.size())
      jt["class_name"] = class_names[static_cast<std::size_t>(t.class_index)];
    jt["initial_residual_sq_norm"] = t.initial_sq_norm;
    jt["terminated_by"] = std::string(to_string(t.terminated_by));
    nlohmann::json steps = nlohmann::json::array();
    for (const auto& s : t.steps)
      steps.push_back({{"concept_name", s.concept_name},
                       {"alpha", s.alpha},
                       {"residual_sq_norm_after", s.residual_sq_norm},
                       {"abs_cosine", s.abs_cosine}});
    jt["steps"] = std::move(steps);
    arr.push_back(std::move(jt));
  }
  return arr;
}

std::vector<DiscoveryTrace> traces_from_json(const nlohmann::json& j) {
  std::vector<DiscoveryTrace> out;
  for (const auto& jt : j) {
    DiscoveryTrace t;
    t.class_index = jt.at("class_index").get<Index>();
    t.initial_sq_norm = jt.at("initial_residual_sq_norm").get<double>();
    t.terminated_by = termination_from_string(jt.at("terminated_by").get<std::string>());
    for (const auto& js : jt.at("steps"))
      t.steps.push_back({js.at("concept_name").get<std::string>(), js.at("alpha").get<double>(),
                         js.at("residual_sq_norm_after").get<double>(), js.at("abs_cosine").get<double>()});
    out.push_back(std::move(t));
  }
  return out;
}

std::string traces_to_text(const std::vector<DiscoveryTrace>& traces, const std::vector<std::string>& class_names) {
  std::string s;
  for (const auto& t : traces) {
    const auto ci = static_cast<std::size_t>(t.class_index);
    const std::string cname = ci < class_names.size() ? class_names[ci] : std::to_string(t.class_index);
    if (cname.find_first_of(" \t\n") != std::string::npos)
      fail(ErrorKind::InvalidArgument, "class name '" + cname + "' contains whitespace");
    s += "class " + std::to_string(t.class_index) + " " + cname + " initial " + format_double(t.initial_sq_norm) +
         " terminated_by " + std::string(to_string(t.terminated_by)) + "\n";
    for (std::size_t i = 0; i < t.steps.size(); ++i) {
      const auto& st = t.steps[i];
      if (st.concept_name.find_first_of("\t\n") != std::string::npos)
        fail(ErrorKind::InvalidArgument, "concept name contains a tab or newline");
      s += std::to_string(i) + "\t" + st.concept_name + "\t" + format_double(st.alpha) + "\t" +
           format_double(st.residual_sq_norm) + "\t" + format_double(st.abs_cosine) + "\n";
    }
  }
  return s;
}

std::vector<DiscoveryTrace> traces_from_text(const std::string& text) {
  std::vector<DiscoveryTrace> out;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto where = "trace line " + std::to_string(lineno);
    if (line.rfind("class ", 0) == 0) {
      std::istringstream ls(line);
      std::string kw, cname, init_kw, init, term_kw, term;
      long long ci = 0;
      ls >> kw >> ci >> cname >> init_kw >> init >> term_kw >> term;
      if (!ls || init_kw != "initial" || term_kw != "terminated_by")
        fail(ErrorKind::InvalidArgument, where + ": malformed class header");
      DiscoveryTrace t;
      t.class_index = static_cast<Index>(ci);
      t.initial_sq_norm = parse_double(init, where);
      t.terminated_by = termination_from_string(term);
      out.push_back(std::move(t));
    } else {
      if (out.empty()) fail(ErrorKind::InvalidArgument, where + ": step before any class header");
      const auto cols = split(line, '\t');
      if (cols.size() != 5) fail(ErrorKind::InvalidArgument, where + ": expected 5 tab-separated fields");
      if (parse_int(cols[0], where) != static_cast<long long>(out.back().steps.size()))
        fail(ErrorKind::InvalidArgument, where + ": steps out of order");
      out.back().steps.push_back(
          {cols[1], parse_double(cols[2], where), parse_double(cols[3], where), parse_double(cols[4], where)});
    }
  }
  return out;
}

void write_accuracy_csv(const fs::path& path, const AccuracyReport& report) {
  std::string s = "class_name,accuracy\n";
  for (std::size_t c = 0; c < report.per_class.size(); ++c)
    s += report.class_names[c] + "," + format_double(report.per_class[c]) + "\n";
  s += "__overall__," + format_double(report.overall) + "\n";
  write_text(path, s);
}

AccuracyReport read_accuracy_csv(const fs::path& path) {
  const auto lines = read_lines(path);
  if (lines.empty() || trim(lines[0]) != "class_name,accuracy")
    fail(ErrorKind::InvalidArgument, path.string() + ": bad header");
  AccuracyReport r;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (trim(lines[i]).empty()) continue;
    const auto pos = lines[i].rfind(',');
    if (pos == std::string::npos) fail(ErrorKind::InvalidArgument, path.string() + ": malformed line");
    const auto name = lines[i].substr(0, pos);
    const double v = parse_double(lines[i].substr(pos + 1), path.string() + " line " + std::to_string(i + 1));
    if (name == "__overall__") {
      r.overall = v;
    } else {
      r.class_names.push_back(name);
      r.per_class.push_back(v);
    }
  }
  return r;
}

void write_delta_csv(const fs::path& path, const AccuracyDelta& d) {
  std::string s = "class_name,before,after,delta\n";
  for (std::size_t c = 0; c < d.delta.size(); ++c)
    s += d.class_names[c] + "," + format_double(d.before[c]) + "," + format_double(d.after[c]) + "," +
         format_double(d.delta[c]) + "\n";
  write_text(path, s);
}

void write_matrix_csv(const fs::path& path, const RowMatrixXd& m, const std::vector<std::string>& header) {
  std::string s;
  for (std::size_t i = 0; i < header.size(); ++i) s += (i ? "," : "") + header[i];
  s += "\n";
  for (Index r = 0; r < m.rows(); ++r) {
    for (Index c = 0; c < m.cols(); ++c) s += (c ? "," : "") + format_double(m(r, c));
    s += "\n";
  }
  write_text(path, s);
}

}  // namespace ocbm::io
