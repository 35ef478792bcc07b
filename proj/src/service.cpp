#include "ocbm/service.hpp"

#include <mutex>

#include "httplib.h"

#include "ocbm/discovery.hpp"
#include "ocbm/inference.hpp"

namespace ocbm::service {

namespace {

int status_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::UnknownConcept:
    case ErrorKind::IndexOutOfRange:
      return 404;
    case ErrorKind::DimensionMismatch:
    case ErrorKind::InconsistentDims:
    case ErrorKind::ZeroVector:
      return 422;
    default:
      return 400;
  }
}

Response error_response(int status, const std::string& kind, const std::string& message) {
  return {status, json{{"error", kind}, {"message", message}}};
}

template <typename F>
Response guarded(F&& f) {
  try {
    return f();
  } catch (const Error& e) {
    return error_response(status_for(e.kind()), std::string(to_string(e.kind())), e.what());
  } catch (const json::exception& e) {
    return error_response(400, "MalformedBody", e.what());
  }
}

std::vector<double> to_std(const VectorXd& v) { return {v.data(), v.data() + v.size()}; }

json rows_json(const RowMatrixXd& m) {
  json out = json::array();
  for (Index r = 0; r < m.rows(); ++r) {
    std::vector<double> row(static_cast<std::size_t>(m.cols()));
    for (Index c = 0; c < m.cols(); ++c) row[static_cast<std::size_t>(c)] = m(r, c);
    out.push_back(row);
  }
  return out;
}

}  // namespace

Session::Session(io::Bundle bundle, ConceptSet initial, std::string search_space, std::string id)
    : bundle_(std::move(bundle)),
      initial_(std::move(initial)),
      search_space_(std::move(search_space)),
      id_(std::move(id)),
      working_(initial_),
      cached_(reconstruct_head(bundle_.head, initial_)) {
  bundle_.concept_set(search_space_);  // must exist
}

std::uint64_t Session::version() const {
  std::shared_lock lock(mu_);
  return version_;
}

ConceptSet Session::working_set() const {
  std::shared_lock lock(mu_);
  return working_;
}

json Session::state_locked() const {
  std::vector<std::string> class_names = bundle_.reference.class_names();
  return json{{"version", version_},
              {"session", id_},
              {"concept_names", working_.names()},
              {"per_class_error", to_std(cached_.per_class_error)},
              {"total_error", cached_.total_error},
              {"class_names", class_names}};
}

Response Session::summary() const {
  std::shared_lock lock(mu_);
  json sets = json::object();
  for (const auto& c : bundle_.concepts) sets[c.name] = c.concepts.size();
  return {200, json{{"version", version_},
                    {"session", id_},
                    {"classes", bundle_.head.num_classes()},
                    {"dims", bundle_.head.dims()},
                    {"rows", bundle_.reference.size()},
                    {"working_set_size", working_.size()},
                    {"initial_set_size", initial_.size()},
                    {"search_space", search_space_},
                    {"concept_sets", sets},
                    {"total_error", cached_.total_error}}};
}

Index Session::class_index(const json& ref) const {
  const auto& names = bundle_.reference.class_names();
  if (ref.is_number_integer()) {
    const auto c = ref.get<Index>();
    if (c < 0 || c >= static_cast<Index>(names.size()))
      fail(ErrorKind::IndexOutOfRange, "class " + std::to_string(c) + " out of range");
    return c;
  }
  if (ref.is_string()) {
    const auto s = ref.get<std::string>();
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == s) return static_cast<Index>(i);
    // numeric query parameters arrive as strings
    if (!s.empty() && s.find_first_not_of("0123456789") == std::string::npos) return class_index(json(std::stoll(s)));
    fail(ErrorKind::IndexOutOfRange, "unknown class '" + s + "'");
  }
  fail(ErrorKind::InvalidArgument, "class must be an index or a name");
}

Response Session::concepts(const std::optional<std::string>& class_ref) const {
  return guarded([&] {
    std::shared_lock lock(mu_);
    const Index c = class_index(class_ref ? json(*class_ref) : json(0));
    json importance = json::array();
    for (const auto& [name, a] : importance_report(cached_, c, static_cast<std::size_t>(cached_.num_concepts())))
      importance.push_back({{"name", name}, {"alpha", a}});
    std::vector<double> alpha(static_cast<std::size_t>(cached_.num_concepts()));
    for (Index j = 0; j < cached_.num_concepts(); ++j) alpha[static_cast<std::size_t>(j)] = cached_.alpha(c, j);
    return Response{200, json{{"version", version_},
                              {"class_index", c},
                              {"class_name", bundle_.reference.class_names()[static_cast<std::size_t>(c)]},
                              {"names", working_.names()},
                              {"alpha", alpha},
                              {"importance", importance},
                              {"class_error", cached_.per_class_error[c]}}};
  });
}

VectorXd Session::vector_from(const json& arr) const {
  if (!arr.is_array()) fail(ErrorKind::InvalidArgument, "embedding must be an array of numbers");
  VectorXd v(static_cast<Index>(arr.size()));
  for (std::size_t i = 0; i < arr.size(); ++i) {
    if (!arr[i].is_number()) fail(ErrorKind::InvalidArgument, "embedding must be an array of numbers");
    v[static_cast<Index>(i)] = arr[i].get<double>();
  }
  require_finite(v, "embedding");
  if (v.size() != bundle_.head.dims())
    fail(ErrorKind::DimensionMismatch, "embedding has " + std::to_string(v.size()) + " dims, expected " +
                                           std::to_string(bundle_.head.dims()));
  return v;
}

std::optional<VectorXd> Session::lookup_concept(const std::string& name) const {
  const auto& space = bundle_.concept_set(search_space_);
  if (auto i = space.find(name)) return VectorXd(space.raw().row(*i).transpose());
  for (const auto& c : bundle_.concepts)
    if (auto i = c.concepts.find(name)) return VectorXd(c.concepts.raw().row(*i).transpose());
  return std::nullopt;
}

Session::EditRequest Session::parse_edit(const json& body) const {
  if (!body.is_object()) fail(ErrorKind::InvalidArgument, "edit body must be an object");
  EditRequest e;
  auto resolve = [&](const json& item, const std::string& key) -> VectorXd {
    if (item.contains("embedding")) return vector_from(item.at("embedding"));
    const auto name = item.at(key).get<std::string>();
    auto v = lookup_concept(name);
    if (!v) fail(ErrorKind::UnknownConcept, "no embedding known for concept '" + name + "'");
    return *v;
  };
  if (body.contains("remove"))
    for (const auto& n : body.at("remove")) e.remove.push_back(n.get<std::string>());
  if (body.contains("replace"))
    for (const auto& r : body.at("replace")) {
      const auto old_name = r.at("name").get<std::string>();
      const auto new_name = r.at("new_name").get<std::string>();
      if (e.replace.count(old_name)) fail(ErrorKind::DuplicateName, "'" + old_name + "' replaced twice");
      e.replace[old_name] = ReplaceEdit<double>{new_name, resolve(r, "new_name")};
    }
  std::vector<std::string> names;
  std::vector<VectorXd> rows;
  if (body.contains("add"))
    for (const auto& a : body.at("add")) {
      names.push_back(a.at("name").get<std::string>());
      rows.push_back(resolve(a, "name"));
    }
  RowMatrixXd m(static_cast<Index>(rows.size()), bundle_.head.dims());
  for (std::size_t i = 0; i < rows.size(); ++i) m.row(static_cast<Index>(i)) = rows[i].transpose();
  e.add = ConceptSet(std::move(names), std::move(m), initial_.normalization());
  return e;
}

ConceptSet Session::apply(const ConceptSet& base, const EditRequest& e) const {
  return edit_concepts<double>(base, e.add, e.remove, e.replace);
}

Response Session::edit(const json& body) {
  return guarded([&] {
    const auto req = parse_edit(body);
    std::unique_lock lock(mu_);
    if (body.contains("version") && body.at("version").get<std::uint64_t>() != version_)
      return error_response(409, "VersionConflict",
                            "edit based on version " + std::to_string(body.at("version").get<std::uint64_t>()) +
                                ", current is " + std::to_string(version_));
    auto next = apply(working_, req);
    auto result = reconstruct_head(bundle_.head, next);

    json record = {{"type", "edit"}, {"remove", req.remove}};
    json rep = json::array();
    for (const auto& [old_name, r] : req.replace)
      rep.push_back({{"name", old_name}, {"new_name", r.new_name}, {"embedding", to_std(r.embedding)}});
    record["replace"] = rep;
    json add = json::array();
    for (Index i = 0; i < req.add.size(); ++i)
      add.push_back({{"name", req.add.names()[static_cast<std::size_t>(i)]},
                     {"embedding", to_std(req.add.raw().row(i).transpose())}});
    record["add"] = add;

    working_ = std::move(next);
    cached_ = std::move(result);
    history_.push_back(std::move(record));
    ++version_;
    json out = state_locked();
    out["alpha"] = rows_json(cached_.alpha);
    return Response{200, out};
  });
}

Response Session::reset(const json& body) {
  return guarded([&] {
    std::unique_lock lock(mu_);
    if (body.is_object() && body.contains("version") && body.at("version").get<std::uint64_t>() != version_)
      return error_response(409, "VersionConflict", "reset based on a stale version");
    working_ = initial_;
    cached_ = reconstruct_head(bundle_.head, initial_);
    history_.push_back({{"type", "reset"}});
    ++version_;
    return Response{200, state_locked()};
  });
}

ConceptSet Session::replay_history() const {
  std::shared_lock lock(mu_);
  ConceptSet s = initial_;
  for (const auto& rec : history_) {
    if (rec.at("type") == "reset")
      s = initial_;
    else
      s = apply(s, parse_edit(rec));
  }
  return s;
}

Response Session::discover(const json& body) const {
  return guarded([&] {
    std::shared_lock lock(mu_);
    const Index c = class_index(body.at("class"));
    const double eps = body.value("epsilon", 1e-6);
    const auto max_iters = body.value("max_iters", std::size_t{1000});
    PursuitOptions opts;
    opts.zero_gain_pruning = !body.value("literal", false);
    const auto& space = bundle_.concept_set(body.value("space", search_space_));
    if (!space.empty() && space.dims() != bundle_.head.dims())
      fail(ErrorKind::DimensionMismatch, "search space dims differ from head dims");
    auto trace = discover_missing(cached_.residuals.row(c).transpose(), space, eps, max_iters, opts);
    trace.class_index = c;
    json out = io::traces_to_json({trace}, bundle_.reference.class_names()).at(0);
    out["version"] = version_;
    return Response{200, out};
  });
}

Response Session::remove_unknown(const json& body) const {
  return guarded([&] {
    std::shared_lock lock(mu_);
    std::string name;
    VectorXd t;
    if (body.contains("embedding")) {
      t = vector_from(body.at("embedding"));
      name = body.value("concept_name", std::string("<raw>"));
    } else {
      name = body.at("concept_name").get<std::string>();
      std::optional<VectorXd> v;
      if (auto i = working_.find(name)) v = VectorXd(working_.raw().row(*i).transpose());
      if (!v) v = lookup_concept(name);
      if (!v) fail(ErrorKind::UnknownConcept, "unknown concept '" + name + "'");
      t = *v;
    }
    const auto removal = ocbm::remove_unknown(bundle_.head, name, t);
    const auto& F = bundle_.reference.features().matrix();
    const auto before = evaluate(head_logits(bundle_.head, F), bundle_.reference);
    const auto after = evaluate(head_logits(removal.new_head, F), bundle_.reference);
    const auto delta = accuracy_delta(before, after);
    json deltas = json::array();
    for (std::size_t c = 0; c < delta.delta.size(); ++c)
      deltas.push_back({{"class_name", delta.class_names[c]},
                        {"before", delta.before[c]},
                        {"after", delta.after[c]},
                        {"delta", delta.delta[c]}});
    json order = json::array();
    for (auto i : delta.by_magnitude()) order.push_back(i);
    return Response{200, json{{"version", version_},
                              {"removed_concept", name},
                              {"gamma", to_std(removal.gamma)},
                              {"overall_before", before.overall},
                              {"overall_after", after.overall},
                              {"accuracy_delta", deltas},
                              {"order_by_magnitude", order}}};
  });
}

Response Session::infer(const json& body) const {
  return guarded([&] {
    std::shared_lock lock(mu_);
    VectorXd x;
    std::optional<Index> row;
    if (body.contains("row")) {
      row = body.at("row").get<Index>();
      if (*row < 0 || *row >= bundle_.reference.size())
        fail(ErrorKind::IndexOutOfRange, "row " + std::to_string(*row) + " out of range");
      x = bundle_.reference.features().row(*row).transpose();
    } else {
      x = vector_from(body.at("feature"));
    }
    const bool include_residual = body.value("include_residual", true);
    const auto d = infer_decomposed(cached_, working_, bundle_.head.bias(), x, include_residual);
    const auto full = infer_full(bundle_.head, x);
    json out{{"version", version_},
             {"concept_names", working_.names()},
             {"class_names", bundle_.reference.class_names()},
             {"include_residual", include_residual},
             {"concept_terms", rows_json(d.concept_terms)},
             {"residual_term", to_std(d.residual_term)},
             {"bias_term", to_std(d.bias_term)},
             {"logits", to_std(d.logits)},
             {"full_logits", to_std(full)},
             {"prediction", argmax(d.logits)}};
    if (row) {
      out["row"] = *row;
      out["label"] = bundle_.reference.labels()[static_cast<std::size_t>(*row)];
    }
    return Response{200, out};
  });
}

json Session::accuracy_locked() const {
  const auto& F = bundle_.reference.features().matrix();
  const auto& bias = bundle_.head.bias();
  const auto with = evaluate(decomposed_logits(cached_, working_, bias, F, true), bundle_.reference);
  const auto without = evaluate(decomposed_logits(cached_, working_, bias, F, false), bundle_.reference);
  return json{{"version", version_},
              {"class_names", bundle_.reference.class_names()},
              {"with_residual", {{"overall", with.overall}, {"per_class", with.per_class}}},
              {"concepts_only", {{"overall", without.overall}, {"per_class", without.per_class}}}};
}

Response Session::accuracy() const {
  return guarded([&] {
    std::shared_lock lock(mu_);
    return Response{200, accuracy_locked()};
  });
}

namespace {

void reply(httplib::Response& res, const Response& r) {
  res.status = r.status;
  res.set_content(r.body.dump(), "application/json");
}

json parse_body(const httplib::Request& req) {
  if (req.body.empty()) return json::object();
  return json::parse(req.body);
}

template <typename F>
httplib::Server::Handler post_handler(F&& f) {
  return [f = std::forward<F>(f)](const httplib::Request& req, httplib::Response& res) {
    json body;
    try {
      body = parse_body(req);
    } catch (const json::exception& e) {
      reply(res, error_response(400, "MalformedBody", e.what()));
      return;
    }
    reply(res, f(body));
  };
}

}  // namespace

void mount(httplib::Server& server, Session& s, const std::optional<std::filesystem::path>& static_dir) {
  server.Get("/summary", [&s](const httplib::Request&, httplib::Response& res) { reply(res, s.summary()); });
  server.Get("/concepts", [&s](const httplib::Request& req, httplib::Response& res) {
    std::optional<std::string> cls;
    if (req.has_param("class")) cls = req.get_param_value("class");
    reply(res, s.concepts(cls));
  });
  server.Get("/accuracy", [&s](const httplib::Request&, httplib::Response& res) { reply(res, s.accuracy()); });
  server.Post("/concepts/edit", post_handler([&s](const json& b) { return s.edit(b); }));
  server.Post("/discover", post_handler([&s](const json& b) { return s.discover(b); }));
  server.Post("/remove-unknown", post_handler([&s](const json& b) { return s.remove_unknown(b); }));
  server.Post("/infer", post_handler([&s](const json& b) { return s.infer(b); }));
  server.Post("/reset", post_handler([&s](const json& b) { return s.reset(b); }));
  if (static_dir) server.set_mount_point("/", static_dir->string());
}

void serve(Session& session, const std::string& host, int port,
           const std::optional<std::filesystem::path>& static_dir, int threads) {
  httplib::Server server;
  if (threads > 0) {
    const auto n = static_cast<std::size_t>(threads);
    server.new_task_queue = [n] { return new httplib::ThreadPool(n); };
  }
  mount(server, session, static_dir);
  if (!server.listen(host, port)) fail(ErrorKind::IoError, "cannot listen on " + host + ":" + std::to_string(port));
}

}  // namespace ocbm::service
