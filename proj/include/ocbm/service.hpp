#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include "json.hpp"

#include "ocbm/ingest.hpp"
#include "ocbm/reconstruct.hpp"

namespace httplib {
class Server;
}

namespace ocbm::service {

using nlohmann::json;

struct Response {
  int status = 200;
  json body;
};

/// Interactive editing state over one loaded bundle. The bundle is read-only;
/// the working concept set changes through edit/reset, each of which bumps the
/// version token. Edits carrying a stale "version" are rejected with 409.
class Session {
 public:
  Session(io::Bundle bundle, ConceptSet initial, std::string search_space, std::string id = "default");

  Response summary() const;
  Response concepts(const std::optional<std::string>& class_ref) const;
  Response edit(const json& body);
  Response discover(const json& body) const;
  Response remove_unknown(const json& body) const;
  Response infer(const json& body) const;
  Response accuracy() const;
  Response reset(const json& body);

  std::uint64_t version() const;
  ConceptSet working_set() const;
  /// Rebuilds the working set by replaying the edit history on the initial set.
  ConceptSet replay_history() const;

 private:
  struct EditRequest {
    ConceptSet add;
    std::vector<std::string> remove;
    std::map<std::string, ReplaceEdit<double>> replace;
  };

  EditRequest parse_edit(const json& body) const;
  ConceptSet apply(const ConceptSet& base, const EditRequest& e) const;
  Index class_index(const json& ref) const;
  VectorXd vector_from(const json& arr) const;
  std::optional<VectorXd> lookup_concept(const std::string& name) const;
  json state_locked() const;
  json accuracy_locked() const;

  const io::Bundle bundle_;
  const ConceptSet initial_;
  const std::string search_space_;
  const std::string id_;

  mutable std::shared_mutex mu_;
  ConceptSet working_;
  ReconstructionResult cached_;
  std::vector<json> history_;
  std::uint64_t version_ = 1;
};

/// Registers every endpoint on `server`; serves `static_dir` at "/" when given.
void mount(httplib::Server& server, Session& session, const std::optional<std::filesystem::path>& static_dir);

/// Blocks serving on host:port.
void serve(Session& session, const std::string& host, int port,
           const std::optional<std::filesystem::path>& static_dir, int threads);

}  // namespace ocbm::service
