#include <barrier>
#include <thread>

#include "doctest.h"
#include "ocbm/inference.hpp"
#include "ocbm/service.hpp"
#include "ocbm/synth.hpp"

#include "httplib.h"

using namespace ocbm;
using service::json;
using service::Session;

namespace {

io::Bundle synth_bundle(std::uint64_t seed = 3) {
  SynthParams p;
  p.seed = seed;
  return synth_dataset(p).bundle;
}

Session make_session(std::uint64_t seed = 3) {
  auto b = synth_bundle(seed);
  auto initial = b.concept_set("class_names");
  return Session(std::move(b), std::move(initial), "full_dictionary");
}

json without_version(json j) {
  j.erase("version");
  return j;
}

/// Runs the endpoints on an ephemeral loopback port for the test's lifetime.
class LiveServer {
 public:
  explicit LiveServer(Session& s) {
    service::mount(server_, s, std::nullopt);
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~LiveServer() {
    server_.stop();
    thread_.join();
  }
  httplib::Client client() const {
    httplib::Client c("127.0.0.1", port_);
    c.set_read_timeout(30, 0);
    return c;
  }

 private:
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
};

}  // namespace

TEST_CASE("summary and read endpoints") {
  auto s = make_session();
  const auto sum = s.summary();
  CHECK(sum.status == 200);
  CHECK(sum.body.at("version") == 1);
  CHECK(sum.body.at("classes") == 5);
  CHECK(sum.body.at("dims") == 16);
  CHECK(sum.body.at("working_set_size") == 5);
  CHECK(sum.body.at("concept_sets").at("full_dictionary") == 16);

  const auto c = s.concepts("class_02");
  REQUIRE(c.status == 200);
  CHECK(c.body.at("class_index") == 2);
  CHECK(c.body.at("names").size() == 5);
  CHECK(s.concepts("2").body.at("alpha") == c.body.at("alpha"));
  CHECK(s.concepts("nope").status == 404);
  CHECK(s.concepts("17").status == 404);

  const auto acc = s.accuracy();
  REQUIRE(acc.status == 200);
  CHECK(acc.body.at("with_residual").at("per_class").size() == 5);

  CHECK(s.discover({{"class", 0}}).status == 200);
  CHECK(s.infer({{"row", 0}}).status == 200);
  CHECK(s.remove_unknown({{"concept_name", "class_00"}}).status == 200);
  CHECK(s.version() == 1);
}

TEST_CASE("edit then reset restores the initial state") {
  auto s = make_session();
  const auto initial = s.summary().body;
  const auto initial_concepts = s.concepts("0").body;

  auto r = s.edit({{"version", 1},
                   {"remove", {"class_01"}},
                   {"add", {{{"name", "concept_007"}}}},
                   {"replace", {{{"name", "class_02"}, {"new_name", "concept_012"}}}}});
  REQUIRE(r.status == 200);
  CHECK(r.body.at("version") == 2);
  CHECK(r.body.at("concept_names") == json({"class_00", "concept_012", "class_03", "class_04", "concept_007"}));
  CHECK(r.body.at("alpha").size() == 5);
  CHECK(s.summary().body.at("total_error") == r.body.at("total_error"));

  r = s.reset({{"version", 2}});
  REQUIRE(r.status == 200);
  CHECK(s.version() == 3);
  CHECK(without_version(s.summary().body) == without_version(initial));
  CHECK(without_version(s.concepts("0").body) == without_version(initial_concepts));
}

TEST_CASE("edit history replays to the working set") {
  auto s = make_session();
  CHECK(s.edit({{"remove", {"class_03"}}}).status == 200);
  CHECK(s.edit({{"add", {{{"name", "raw_thing"}, {"embedding", std::vector<double>(16, 0.25)}}}}}).status == 200);
  CHECK(s.replay_history() == s.working_set());
  CHECK(s.reset(json::object()).status == 200);
  CHECK(s.edit({{"add", {{{"name", "concept_015"}}}}}).status == 200);
  CHECK(s.replay_history() == s.working_set());
  CHECK(s.working_set().size() == 6);
}

TEST_CASE("inference with residual reproduces the head logits") {
  auto s = make_session();
  for (int row : {0, 17, 99}) {
    const auto r = s.infer({{"row", row}, {"include_residual", true}});
    REQUIRE(r.status == 200);
    const auto logits = r.body.at("logits").get<std::vector<double>>();
    const auto full = r.body.at("full_logits").get<std::vector<double>>();
    for (std::size_t c = 0; c < logits.size(); ++c)
      CHECK(std::abs(logits[c] - full[c]) <= 1e-6 * std::max(1.0, std::abs(full[c])));
  }
  const auto none = s.infer({{"feature", std::vector<double>(16, 1.0)}, {"include_residual", false}});
  REQUIRE(none.status == 200);
  CHECK(none.body.at("residual_term") == json(std::vector<double>(5, 0.0)));
}

TEST_CASE("removing a generating concept lowers that class's accuracy") {
  auto s = make_session();
  for (int c = 0; c < 5; ++c) {
    const auto name = s.accuracy().body.at("class_names")[static_cast<std::size_t>(c)].get<std::string>();
    const auto r = s.remove_unknown({{"concept_name", name}});
    REQUIRE(r.status == 200);
    CHECK(r.body.at("accuracy_delta")[static_cast<std::size_t>(c)].at("delta").get<double>() < 0);
    CHECK(r.body.at("gamma").size() == 5);
  }
  CHECK(s.version() == 1);
}

TEST_CASE("error statuses") {
  auto s = make_session();
  CHECK(s.edit({{"remove", {"missing"}}}).status == 404);
  CHECK(s.edit({{"add", {{{"name", "nobody_knows"}}}}}).status == 404);
  CHECK(s.edit({{"add", {{{"name", "x"}, {"embedding", {1.0, 2.0}}}}}}).status == 422);
  CHECK(s.edit({{"add", {{{"name", "z"}, {"embedding", std::vector<double>(16, 0.0)}}}}}).status == 422);
  CHECK(s.edit({{"add", {{{"name", "class_00"}}}}}).status == 400);
  CHECK(s.edit({{"add", "not-a-list"}}).status == 400);
  CHECK(s.edit(json::array()).status == 400);
  CHECK(s.infer({{"row", 100000}}).status == 404);
  CHECK(s.infer({{"feature", {1.0}}}).status == 422);
  CHECK(s.infer(json::object()).status == 400);
  CHECK(s.discover({{"class", 9}}).status == 404);
  CHECK(s.discover({{"class", 0}, {"space", "nope"}}).status == 404);
  CHECK(s.remove_unknown({{"concept_name", "missing"}}).status == 404);
  CHECK(s.remove_unknown({{"embedding", {1.0}}}).status == 422);
  CHECK(s.version() == 1);
  CHECK(s.working_set() == make_session().working_set());
}

TEST_CASE("stale versions conflict") {
  auto s = make_session();
  CHECK(s.edit({{"version", 1}, {"remove", {"class_00"}}}).status == 200);
  const auto r = s.edit({{"version", 1}, {"remove", {"class_01"}}});
  CHECK(r.status == 409);
  CHECK(r.body.at("error") == "VersionConflict");
  CHECK(s.reset({{"version", 1}}).status == 409);
  CHECK(s.version() == 2);
}

TEST_CASE("racing edits with the same parent version") {
  auto s = make_session();
  for (int round = 0; round < 20; ++round) {
    const auto v = s.version();
    std::barrier sync(2);
    int status[2] = {0, 0};
    auto worker = [&](int i, const char* name) {
      sync.arrive_and_wait();
      status[i] = s.edit({{"version", v}, {"add", {{{"name", name}}}}}).status;
    };
    std::thread a(worker, 0, "concept_010"), b(worker, 1, "concept_011");
    a.join();
    b.join();
    CHECK(((status[0] == 200 && status[1] == 409) || (status[0] == 409 && status[1] == 200)));
    CHECK(s.version() == v + 1);
    REQUIRE(s.reset(json::object()).status == 200);
  }
}

TEST_CASE("HTTP endpoints") {
  auto s = make_session();
  LiveServer server(s);
  auto cli = server.client();

  auto get = [&](const std::string& path) {
    auto r = cli.Get(path);
    REQUIRE(r);
    return std::make_pair(r->status, json::parse(r->body));
  };
  auto post = [&](const std::string& path, const std::string& body) {
    auto r = cli.Post(path, body, "application/json");
    REQUIRE(r);
    return std::make_pair(r->status, json::parse(r->body));
  };

  const auto [st0, initial] = get("/summary");
  CHECK(st0 == 200);
  CHECK(get("/concepts?class=class_01").second.at("class_index") == 1);
  CHECK(get("/concepts?class=zzz").first == 404);
  CHECK(get("/accuracy").first == 200);

  const auto edit = post("/concepts/edit", json({{"version", 1}, {"remove", {"class_04"}}}).dump());
  CHECK(edit.first == 200);
  CHECK(post("/concepts/edit", json({{"version", 1}, {"remove", {"class_03"}}}).dump()).first == 409);
  CHECK(post("/concepts/edit", "{not json").first == 400);
  CHECK(post("/concepts/edit", json({{"add", {{{"name", "q"}, {"embedding", {1, 2}}}}}}).dump()).first == 422);

  const auto disc = post("/discover", json({{"class", 4}, {"epsilon", 1e-10}}).dump());
  REQUIRE(disc.first == 200);
  CHECK(disc.second.at("class_index") == 4);
  CHECK(disc.second.at("steps").size() >= 1);

  const auto inf = post("/infer", json({{"row", 5}, {"include_residual", true}}).dump());
  REQUIRE(inf.first == 200);
  const auto logits = inf.second.at("logits").get<std::vector<double>>();
  const auto full = inf.second.at("full_logits").get<std::vector<double>>();
  for (std::size_t c = 0; c < logits.size(); ++c) CHECK(logits[c] == doctest::Approx(full[c]).epsilon(1e-6));

  const auto rem = post("/remove-unknown", json({{"concept_name", "class_00"}}).dump());
  REQUIRE(rem.first == 200);
  CHECK(rem.second.at("accuracy_delta")[0].at("delta").get<double>() < 0);

  CHECK(post("/reset", "").first == 200);
  CHECK(without_version(get("/summary").second) == without_version(initial));
  CHECK(get("/summary").second.at("version") == 3);
}
