#include "ocbm/cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "json.hpp"

#include "ocbm/alignment.hpp"
#include "ocbm/discovery.hpp"
#include "ocbm/inference.hpp"
#include "ocbm/ingest.hpp"
#include "ocbm/reconstruct.hpp"
#include "ocbm/service.hpp"
#include "ocbm/synth.hpp"

namespace ocbm::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidArgument:
      return kExitUsage;
    case ErrorKind::ZeroVector:
    case ErrorKind::NumericError:
      return kExitNumeric;
    default:
      return kExitData;
  }
}

int thread_cap() {
  if (const char* s = std::getenv("OCBM_THREADS")) {
    try {
      const int n = std::stoi(s);
      if (n >= 1) return n;
    } catch (const std::exception&) {
    }
    fail(ErrorKind::InvalidArgument, "OCBM_THREADS must be a positive integer");
  }
  return 0;
}

struct Common {
  std::string bundle;
  std::string out;
  std::string head;
  std::string extractor;
  bool no_normalize = false;

  std::optional<Normalization> mode() const {
    return no_normalize ? std::optional(Normalization::Raw) : std::nullopt;
  }
};

io::Bundle load(const Common& c) {
  auto b = io::load_bundle(c.bundle, c.mode());
  if (!c.head.empty()) {
    const fs::path hp(c.head);
    b.head = io::load_head(hp, hp.parent_path() / "head_bias.csv");
    if (b.head.num_classes() != b.reference.num_classes() || b.head.dims() != b.reference.dims())
      fail(ErrorKind::InconsistentDims, c.head + ": head shape does not match the bundle");
  }
  return b;
}

ConceptSet load_set(const Common& c, const std::string& ref) {
  return io::load_concepts(io::resolve_manifest(c.bundle, ref), c.mode());
}

/// Features the head operates on: reference embeddings, or the extractor
/// applied to the bundle inputs when one is given.
RowMatrixXd eval_features(const Common& c, const io::Bundle& b) {
  if (c.extractor.empty()) return b.reference.features().matrix();
  const ToyExtractor g{EmbeddingMatrix(io::read_matrix(c.extractor))};
  return g.apply(b.train.features().matrix());
}

std::vector<std::string> class_headers(const io::Bundle& b) { return b.reference.class_names(); }

fs::path out_dir(const Common& c) {
  const fs::path p(c.out);
  fs::create_directories(p);
  return p;
}

void add_common(CLI::App* sub, Common& c, bool head = true) {
  sub->add_option("--bundle", c.bundle, "Bundle directory")->required();
  sub->add_option("--out", c.out, "Output directory")->required();
  sub->add_flag("--no-normalize", c.no_normalize, "Use concept embeddings without L2 normalization");
  if (head) sub->add_option("--head", c.head, "Override head.ocbm (head_bias.csv is read from the same directory)");
}

void print_accuracy(std::ostream& out, const std::string& label, const AccuracyReport& r) {
  out << label << " accuracy = " << r.overall << "\n";
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Concept reconstruction, discovery and removal over embedding bundles", "ocbm"};
  app.require_subcommand(1);

  // synth
  SynthParams sp;
  std::string synth_out;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic bundle");
  synth->add_option("--classes", sp.classes)->capture_default_str();
  synth->add_option("--dims", sp.dims)->capture_default_str();
  synth->add_option("--per-class", sp.per_class)->capture_default_str();
  synth->add_option("--concepts", sp.concept_count, "Dictionary size (0: max(2*classes, dims))")->capture_default_str();
  synth->add_option("--input-dims", sp.input_dims, "Extractor input dims (0: dims)")->capture_default_str();
  synth->add_option("--support", sp.support, "Dictionary concepts per class head")->capture_default_str();
  synth->add_option("--noise", sp.noise)->capture_default_str();
  synth->add_option("--seed", sp.seed)->capture_default_str();
  synth->add_option("--out", synth_out)->required();

  // train-toy
  Common tc;
  LossConfig loss_cfg;
  std::size_t epochs = 200;
  double lr = 0.1;
  std::uint64_t train_seed = 0;
  auto* train = app.add_subcommand("train-toy", "Train a linear extractor and head with the combined loss");
  add_common(train, tc, false);
  train->add_option("--beta1", loss_cfg.beta1)->capture_default_str();
  train->add_option("--beta2", loss_cfg.beta2)->capture_default_str();
  train->add_option("--epochs", epochs)->capture_default_str();
  train->add_option("--lr", lr)->capture_default_str();
  train->add_option("--seed", train_seed)->capture_default_str();

  // prototypes
  Common pc;
  auto* protos = app.add_subcommand("prototypes", "Class prototypes of the reference embeddings");
  add_common(protos, pc, false);

  // reconstruct
  Common rc;
  std::string rc_concepts;
  std::size_t top_n = 5;
  auto* recon = app.add_subcommand("reconstruct", "Least-squares reconstruction of the head from a concept set");
  add_common(recon, rc);
  recon->add_option("--concepts", rc_concepts, "Concept manifest path or bundle set name")->required();
  recon->add_option("--top", top_n, "Concepts per class in importance.csv")->capture_default_str();

  // discover
  Common dc;
  std::string dc_concepts, dc_search;
  double epsilon = 1e-6;
  std::size_t max_iters = 1000;
  bool literal = false, refit = false;
  std::optional<Index> dc_class;
  auto* disc = app.add_subcommand("discover", "Greedy discovery of concepts missing from the queried set");
  add_common(disc, dc);
  disc->add_option("--concepts", dc_concepts, "Queried concept set (empty when omitted)");
  disc->add_option("--search", dc_search, "Search-space concept set")->required();
  disc->add_option("--epsilon", epsilon)->capture_default_str();
  disc->add_option("--max-iters", max_iters)->capture_default_str();
  disc->add_option("--class", dc_class, "Only this class index");
  disc->add_flag("--literal-pursuit", literal, "Consume zero-gain concepts instead of skipping them");
  disc->add_flag("--refit", refit, "Re-solve the reconstruction over queried and discovered concepts");

  // remove
  Common mc;
  std::string concept_name, mc_concepts;
  auto* rem = app.add_subcommand("remove", "Project a concept direction out of every class head");
  add_common(rem, mc);
  rem->add_option("--concept-name", concept_name)->required();
  rem->add_option("--concepts", mc_concepts, "Concept set holding the concept (default: every bundle set)");

  // infer
  Common ic;
  std::string ic_concepts;
  std::optional<Index> ic_row;
  bool include_residual = false;
  auto* inf = app.add_subcommand("infer", "Concept-decomposed logits");
  add_common(inf, ic);
  inf->add_option("--concepts", ic_concepts)->required();
  inf->add_option("--row", ic_row, "Single row (default: every row)");
  inf->add_flag("--include-residual", include_residual);
  inf->add_option("--extractor", ic.extractor, "Apply this extractor to features.ocbm");

  // eval
  Common ec;
  std::string ec_concepts;
  bool ec_residual = false;
  auto* ev = app.add_subcommand("eval", "Accuracy of the head, or of the concept pathway with --concepts");
  add_common(ev, ec);
  ev->add_option("--concepts", ec_concepts);
  ev->add_flag("--include-residual", ec_residual);
  ev->add_option("--extractor", ec.extractor, "Apply this extractor to features.ocbm");

  // delta
  std::string before_csv, after_csv, delta_out;
  auto* del = app.add_subcommand("delta", "Per-class accuracy change between two accuracy.csv files");
  del->add_option("--before", before_csv)->required();
  del->add_option("--after", after_csv)->required();
  del->add_option("--out", delta_out, "Output CSV path")->required();

  // serve
  Common sc;
  std::string sc_concepts, sc_search, host = "127.0.0.1", static_dir;
  int port = 8080;
  auto* srv = app.add_subcommand("serve", "HTTP service for interactive concept editing");
  srv->add_option("--bundle", sc.bundle)->required();
  srv->add_option("--concepts", sc_concepts, "Initial working set (empty when omitted)");
  srv->add_option("--search", sc_search, "Search space for discovery (default: full_dictionary)");
  srv->add_option("--host", host)->capture_default_str();
  srv->add_option("--port", port)->capture_default_str();
  srv->add_option("--static-dir", static_dir, "Directory with built UI assets");
  srv->add_flag("--no-normalize", sc.no_normalize);

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  out << std::setprecision(10);
  try {
    const int threads = thread_cap();
    if (threads > 0) Eigen::setNbThreads(threads);

    if (*synth) {
      const auto s = synth_dataset(sp);
      write_synth_bundle(synth_out, s);
      out << "synth: " << s.params.classes << " classes, " << s.params.dims << " dims, "
          << s.params.concept_count << " concepts, " << s.bundle.reference.size() << " rows -> " << synth_out << "\n";
      out << "rng: " << kRngName << " seed " << s.params.seed << "\n";
    } else if (*train) {
      const auto b = io::load_bundle(tc.bundle);
      const auto r = train_toy(b.train, b.reference, loss_cfg, epochs, lr, train_seed);
      const auto dir = out_dir(tc);
      io::write_matrix(dir / "extractor.ocbm", r.model.extractor.weight.matrix());
      io::write_head(dir / "head.ocbm", dir / "head_bias.csv", r.model.head);
      std::string curve = "epoch,loss\n";
      for (std::size_t e = 0; e < r.loss_curve.size(); ++e)
        curve += std::to_string(e) + "," + io::format_double(r.loss_curve[e]) + "\n";
      io::write_text(dir / "loss_curve.csv", curve);
      const auto G = r.model.extractor.apply(b.train.features().matrix());
      const double align = align_loss(G, b.train.labels(), r.bank);
      const auto acc = evaluate(head_logits(r.model.head, G), b.train);
      json meta{{"rng", kRngName},         {"seed", train_seed},          {"beta1", loss_cfg.beta1},
                {"beta2", loss_cfg.beta2}, {"epochs", epochs},            {"lr", lr},
                {"final_loss", r.loss_curve.back()}, {"align_loss", align}, {"train_accuracy", acc.overall}};
      io::write_text(dir / "train.json", meta.dump(2) + "\n");
      out << "train-toy: final loss = " << r.loss_curve.back() << ", align_loss = " << align
          << ", train accuracy = " << acc.overall << "\n";
    } else if (*protos) {
      const auto b = io::load_bundle(pc.bundle);
      const auto bank = compute_prototypes(b.reference);
      const auto dir = out_dir(pc);
      io::write_matrix(dir / "prototypes.ocbm", bank.prototypes.matrix());
      io::write_class_names(dir / "class_names.txt", bank.class_names);
      const double align = align_loss(b.reference.features().matrix(), b.reference.labels(), bank);
      out << "prototypes: " << bank.prototypes.rows() << " classes, reference align_loss = " << align << "\n";
    } else if (*recon) {
      const auto b = load(rc);
      const auto concepts = load_set(rc, rc_concepts);
      const auto r = reconstruct_head(b.head, concepts);
      const auto dir = out_dir(rc);
      io::write_reconstruction(dir, r, class_headers(b));
      std::string imp = "class_name,rank,concept,alpha\n";
      for (Index c = 0; c < r.num_classes(); ++c) {
        const auto rows = importance_report(r, c, top_n);
        for (std::size_t i = 0; i < rows.size(); ++i)
          imp += class_headers(b)[static_cast<std::size_t>(c)] + "," + std::to_string(i) + "," + rows[i].first + "," +
                 io::format_double(rows[i].second) + "\n";
      }
      io::write_text(dir / "importance.csv", imp);
      out << "reconstruct: " << concepts.size() << " concepts, total_error = " << r.total_error << "\n";
    } else if (*disc) {
      const auto b = load(dc);
      const auto queried = dc_concepts.empty() ? ConceptSet::empty(b.head.dims(), dc.mode().value_or(Normalization::Unit))
                                               : load_set(dc, dc_concepts);
      const auto space = load_set(dc, dc_search);
      const auto r = reconstruct_head(b.head, queried);
      PursuitOptions opts;
      opts.zero_gain_pruning = !literal;
      std::vector<DiscoveryTrace> traces;
      if (dc_class) {
        if (*dc_class < 0 || *dc_class >= r.num_classes()) fail(ErrorKind::IndexOutOfRange, "class out of range");
        auto t = discover_missing(r.residuals.row(*dc_class).transpose(), space, epsilon, max_iters, opts);
        t.class_index = *dc_class;
        traces.push_back(std::move(t));
      } else {
        traces = discover_all_classes(r, space, epsilon, max_iters, opts);
      }
      const auto dir = out_dir(dc);
      io::write_text(dir / "traces.txt", io::traces_to_text(traces, class_headers(b)));
      io::write_text(dir / "traces.json", io::traces_to_json(traces, class_headers(b)).dump(2) + "\n");
      for (const auto& t : traces)
        out << class_headers(b)[static_cast<std::size_t>(t.class_index)] << ": " << t.steps.size()
            << " concepts, residual " << t.initial_sq_norm << " -> " << t.final_sq_norm() << " ("
            << to_string(t.terminated_by) << ")\n";
      if (refit) {
        const auto merged = refit_with_discovered(b.head, queried, space, traces);
        io::write_reconstruction(dir / "refit", merged, class_headers(b));
        out << "refit: " << merged.num_concepts() << " concepts, total_error = " << merged.total_error << "\n";
      }
    } else if (*rem) {
      const auto b = load(mc);
      std::optional<VectorXd> t;
      if (!mc_concepts.empty()) {
        const auto set = load_set(mc, mc_concepts);
        t = set.raw().row(set.index_of(concept_name)).transpose();
      } else {
        for (const auto& c : b.concepts)
          if (auto i = c.concepts.find(concept_name)) {
            t = c.concepts.raw().row(*i).transpose();
            break;
          }
      }
      if (!t) fail(ErrorKind::UnknownConcept, "concept '" + concept_name + "' not found");
      const auto removal = remove_unknown(b.head, concept_name, *t);
      const auto dir = out_dir(mc);
      io::write_head(dir / "head.ocbm", dir / "head_bias.csv", removal.new_head);
      std::string g = "class_name,gamma\n";
      for (Index c = 0; c < removal.gamma.size(); ++c)
        g += class_headers(b)[static_cast<std::size_t>(c)] + "," + io::format_double(removal.gamma[c]) + "\n";
      io::write_text(dir / "gamma.csv", g);
      const auto& F = b.reference.features().matrix();
      const auto before = evaluate(head_logits(b.head, F), b.reference);
      const auto after = evaluate(head_logits(removal.new_head, F), b.reference);
      io::write_accuracy_csv(dir / "accuracy_before.csv", before);
      io::write_accuracy_csv(dir / "accuracy_after.csv", after);
      io::write_delta_csv(dir / "delta.csv", accuracy_delta(before, after));
      io::write_text(dir / "removal.json", json{{"removed_concept", concept_name},
                                                {"overall_before", before.overall},
                                                {"overall_after", after.overall}}
                                               .dump(2) + "\n");
      out << "remove: '" << concept_name << "' overall accuracy " << before.overall << " -> " << after.overall << "\n";
    } else if (*inf) {
      const auto b = load(ic);
      const auto concepts = load_set(ic, ic_concepts);
      const auto r = reconstruct_head(b.head, concepts);
      const auto F = eval_features(ic, b);
      const auto dir = out_dir(ic);
      if (ic_row) {
        if (*ic_row < 0 || *ic_row >= F.rows()) fail(ErrorKind::IndexOutOfRange, "row out of range");
        const auto d = infer_decomposed(r, concepts, b.head.bias(), F.row(*ic_row).transpose(), include_residual);
        json j{{"row", *ic_row},
               {"concept_names", concepts.names()},
               {"class_names", class_headers(b)},
               {"include_residual", include_residual}};
        json terms = json::array();
        for (Index c = 0; c < d.concept_terms.rows(); ++c) {
          std::vector<double> row(d.concept_terms.row(c).data(), d.concept_terms.row(c).data() + d.concept_terms.cols());
          terms.push_back(row);
        }
        j["concept_terms"] = terms;
        j["residual_term"] = std::vector<double>(d.residual_term.data(), d.residual_term.data() + d.residual_term.size());
        j["bias_term"] = std::vector<double>(d.bias_term.data(), d.bias_term.data() + d.bias_term.size());
        j["logits"] = std::vector<double>(d.logits.data(), d.logits.data() + d.logits.size());
        io::write_text(dir / "decomposition.json", j.dump(2) + "\n");
        io::write_matrix_csv(dir / "logits.csv", d.logits.transpose(), class_headers(b));
        out << "infer: row " << *ic_row << " predicted " << class_headers(b)[static_cast<std::size_t>(argmax(d.logits))]
            << "\n";
      } else {
        const auto L = decomposed_logits(r, concepts, b.head.bias(), F, include_residual);
        io::write_matrix_csv(dir / "logits.csv", L, class_headers(b));
        out << "infer: " << L.rows() << " rows" << (include_residual ? " (with residual)" : " (concepts only)") << "\n";
      }
    } else if (*ev) {
      const auto b = load(ec);
      const auto F = eval_features(ec, b);
      RowMatrixXd L;
      if (ec_concepts.empty()) {
        L = head_logits(b.head, F);
      } else {
        const auto concepts = load_set(ec, ec_concepts);
        L = decomposed_logits(reconstruct_head(b.head, concepts), concepts, b.head.bias(), F, ec_residual);
      }
      const auto acc = evaluate(L, b.reference);
      const auto dir = out_dir(ec);
      io::write_accuracy_csv(dir / "accuracy.csv", acc);
      io::write_matrix_csv(dir / "logits.csv", L, class_headers(b));
      print_accuracy(out, "eval:", acc);
      for (std::size_t c = 0; c < acc.per_class.size(); ++c)
        out << "  " << acc.class_names[c] << " " << acc.per_class[c] << "\n";
    } else if (*del) {
      const auto d = accuracy_delta(io::read_accuracy_csv(before_csv), io::read_accuracy_csv(after_csv));
      io::write_delta_csv(delta_out, d);
      for (auto i : d.by_magnitude()) out << d.class_names[i] << " " << d.delta[i] << "\n";
    } else if (*srv) {
      auto b = io::load_bundle(sc.bundle, sc.mode());
      const auto initial = sc_concepts.empty()
                               ? ConceptSet::empty(b.head.dims(), sc.mode().value_or(Normalization::Unit))
                               : io::load_concepts(io::resolve_manifest(sc.bundle, sc_concepts), sc.mode());
      std::string search = sc_search;
      if (search.empty()) {
        if (b.concepts.empty()) fail(ErrorKind::InvalidArgument, "bundle has no concept sets to search");
        search = b.concepts.front().name;
        for (const auto& c : b.concepts)
          if (c.name == "full_dictionary") search = c.name;
      }
      service::Session session(std::move(b), initial, search);
      out << "serving on http://" << host << ":" << port << std::endl;
      service::serve(session, host, port, static_dir.empty() ? std::nullopt : std::optional<fs::path>(static_dir),
                     threads);
    }
  } catch (const Error& e) {
    err << "error [" << to_string(e.kind()) << "]: " << e.what() << "\n";
    return exit_code_for(e.kind());
  } catch (const fs::filesystem_error& e) {
    err << "error [IoError]: " << e.what() << "\n";
    return kExitData;
  } catch (const nlohmann::json::exception& e) {
    err << "error [InvalidArgument]: " << e.what() << "\n";
    return kExitData;
  }
  return kExitOk;
}

}  // namespace ocbm::cli
