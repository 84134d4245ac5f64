// spikelab command line. Binds the library into file-based experiments:
// generate a checkpoint, calibrate it, analyze the per-module scale ratios,
// derive mitigation artifacts (exclusion set, prefix) and evaluate execution
// plans against them. Every artifact gets a .manifest.json sidecar with
// input fingerprints so stale pipelines fail loudly.

#include <cinttypes>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "spikelab/calibration.hpp"
#include "spikelab/evaluation.hpp"
#include "spikelab/manifest.hpp"
#include "spikelab/model_io.hpp"
#include "spikelab/qfem.hpp"
#include "spikelab/qfep.hpp"
#include "spikelab/synthesizer.hpp"

namespace {

using namespace spikelab;
using nlohmann::json;

class FingerprintMismatch : public std::runtime_error {
    using std::runtime_error::runtime_error;
};

int env_jobs() {
    const char* v = std::getenv("SPIKELAB_JOBS");
    if (v == nullptr) return 1;
    const int n = std::atoi(v);
    return n >= 1 ? n : 1;
}

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

void write_json_artifact(const std::string& path, const json& j) {
    write_file_text(path, j.dump(2) + "\n");
}

// ---- corpus plumbing --------------------------------------------------------

struct CorpusArgs {
    std::string corpus = "synthetic";
    int32_t samples = 64;
    int32_t seqlen = 64;
    uint64_t seed = 1;
    double spike_rate = 1.0;
};

void add_corpus_flags(CLI::App* cmd, CorpusArgs& a) {
    cmd->add_option("--corpus", a.corpus,
                    "Token corpus: JSON file of samples, or 'synthetic' to sample "
                    "from the model's embedded grammar")
        ->capture_default_str();
    cmd->add_option("--samples", a.samples, "Synthetic corpus: number of samples")
        ->capture_default_str();
    cmd->add_option("--seqlen", a.seqlen, "Synthetic corpus: tokens per sample incl. BOS")
        ->capture_default_str();
    cmd->add_option("--seed", a.seed, "Synthetic corpus seed")->capture_default_str();
    cmd->add_option("--spike-rate", a.spike_rate,
                    "Synthetic corpus: expected trigger tokens per sample")
        ->capture_default_str();
}

// Accepts either a bare array of token arrays or {"samples": [...]}.
std::vector<std::vector<int32_t>> load_corpus_file(const std::string& path) {
    const json j = json::parse(read_file_text(path));
    const json& arr = j.is_object() ? j.at("samples") : j;
    return arr.get<std::vector<std::vector<int32_t>>>();
}

std::vector<std::vector<int32_t>> resolve_corpus(const Model& m, const CorpusArgs& a,
                                                 RunManifest& man, json& desc) {
    if (a.corpus == "synthetic") {
        CorpusOptions opt;
        opt.samples = a.samples;
        opt.seq_len = a.seqlen;
        opt.spike_rate = a.spike_rate;
        opt.seed = a.seed;
        desc = {{"kind", "synthetic"},
                {"samples", a.samples},
                {"seqlen", a.seqlen},
                {"seed", a.seed},
                {"spike_rate", a.spike_rate}};
        return sample_corpus(m, opt);
    }
    man.add_input(a.corpus);
    desc = {{"kind", "file"}, {"path", a.corpus}, {"fingerprint", man.inputs.at(a.corpus)}};
    return load_corpus_file(a.corpus);
}

// ---- checked artifact loading -----------------------------------------------

Model load_model_input(const std::string& path, RunManifest& man) {
    man.add_input(path);
    return load_model(path);
}

CalibrationReport load_calib_input(const std::string& path, const Model& m, RunManifest& man) {
    man.add_input(path);
    CalibrationReport rep = load_calibration(path);
    if (rep.model_fingerprint != m.fingerprint)
        throw FingerprintMismatch("calibration " + path + " was computed for model fingerprint " +
                                  rep.model_fingerprint + " but this model is " + m.fingerprint);
    return rep;
}

void check_artifact_fingerprint(const json& j, const Model& m, const std::string& path) {
    if (j.contains("model_fingerprint") &&
        j.at("model_fingerprint").get<std::string>() != m.fingerprint)
        throw FingerprintMismatch(path + " was derived from model fingerprint " +
                                  j.at("model_fingerprint").get<std::string>() +
                                  " but this model is " + m.fingerprint);
}

// ---- genmodel ---------------------------------------------------------------

struct GenArgs {
    int32_t layers = 4, dim = 64, heads = 4, dff = 128;
    std::string ffn = "swiglu";
    std::string spike_mode = "first";
    int32_t spike_layer = 2;
    int32_t spike_token = 39;
    double target_ratio = 500.0;
    uint64_t seed = 1;
    std::string out;
};

int run_genmodel(const GenArgs& a, RunManifest man) {
    SynthConfig sc;
    sc.seed = a.seed;
    sc.n_layers = a.layers;
    sc.d_model = a.dim;
    sc.n_heads = a.heads;
    sc.d_ff = a.dff;
    sc.spike_layer = a.spike_layer;
    sc.spike_token = a.spike_token;
    sc.target_ratio = a.target_ratio;
    if (a.ffn == "swiglu") sc.ffn_kind = FfnKind::glu_silu;
    else if (a.ffn == "geglu") sc.ffn_kind = FfnKind::glu_gelu;
    else sc.ffn_kind = FfnKind::plain;
    if (a.spike_mode == "first") sc.spike_mode = SpikeMode::first_occurrence;
    else if (a.spike_mode == "static") sc.spike_mode = SpikeMode::static_spike;
    else sc.spike_mode = SpikeMode::none;
    sc.validate();

    const Model m = synthesize_model(sc);
    const std::string fp = save_model(m, a.out);
    man.seed = a.seed;
    man.outputs = {a.out};
    write_manifests(man);
    std::cout << "wrote " << a.out << " fingerprint " << fp << "\n";
    return 0;
}

// ---- calibrate --------------------------------------------------------------

struct CalibrateArgs {
    std::string model;
    CorpusArgs corpus;
    int jobs = env_jobs();
    std::string out;
};

int run_calibrate(const CalibrateArgs& a, RunManifest man) {
    const Model m = load_model_input(a.model, man);
    json corpus_desc;
    const auto corpus = resolve_corpus(m, a.corpus, man, corpus_desc);

    CalibrationOptions opt;
    opt.jobs = a.jobs;
    CalibrationReport rep = run_calibration(m, corpus, opt);
    rep.corpus_seed = a.corpus.seed;
    save_calibration(rep, a.out);

    man.seed = a.corpus.seed;
    man.outputs = {a.out};
    write_manifests(man);
    std::cout << "wrote " << a.out << " (" << corpus.size() << " samples, "
              << rep.modules.size() << " modules)\n";
    return 0;
}

// ---- analyze ----------------------------------------------------------------

struct AnalyzeArgs {
    std::string calib;
    std::string out;
};

int run_analyze(const AnalyzeArgs& a, RunManifest man) {
    man.add_input(a.calib);
    const CalibrationReport rep = load_calibration(a.calib);

    std::string csv = "module,layer,kind,max,median,ratio,static_scale\n";
    for (size_t mi = 0; mi < rep.modules.size(); ++mi) {
        const auto pool = rep.pool(mi);
        const double mx = *std::max_element(pool.begin(), pool.end());
        const double med = median_of(pool);
        csv += std::to_string(module_index(rep.modules[mi])) + "," +
               std::to_string(rep.modules[mi].layer) + "," +
               module_kind_name(rep.modules[mi].kind) + "," + fmt_double(mx) + "," +
               fmt_double(med) + "," + fmt_double(max_median_ratio(pool)) + "," +
               fmt_double(rep.static_scales[mi]) + "\n";
    }
    write_file_text(a.out, csv);

    man.seed = rep.corpus_seed;
    man.outputs = {a.out};
    write_manifests(man);
    std::cout << "wrote " << a.out << "\n";
    return 0;
}

// ---- qfem -------------------------------------------------------------------

struct QfemArgs {
    std::string model;
    std::string calib;
    bool search_alpha = false;
    std::string alpha;  // number or "inf"
    std::string curve;
    int jobs = env_jobs();
    std::string out;
};

int run_qfem(const QfemArgs& a, RunManifest man) {
    if (a.search_alpha == !a.alpha.empty())
        throw std::invalid_argument("qfem: pass exactly one of --search-alpha or --alpha");

    const Model m = load_model_input(a.model, man);
    const CalibrationReport rep = load_calib_input(a.calib, m, man);
    const std::vector<double> ratios = module_ratios(rep);

    EvalOptions eopt;
    eopt.jobs = a.jobs;
    const double ppl_fp = perplexity(m, PreparedPlan::prepare_fp(m), rep.tokens, eopt).ppl;
    const auto eval = exclusion_ppl_evaluator(m, w8a8_plan(parse_act_scheme("per-tensor-dyn")),
                                              rep.modules, rep.tokens, a.jobs);

    ThresholdResult res;
    if (a.search_alpha) {
        res = optimize_threshold(ratios, ppl_fp, eval, ThresholdSearch::binary, !a.curve.empty());
        if (res.degenerate)
            std::cout << "full quantization does not degrade perplexity; keeping alpha = inf\n";
        else if (!res.crossing_found)
            std::cout << "warning: no threshold pays for itself; keeping alpha = inf\n";
    } else {
        double alpha = std::numeric_limits<double>::infinity();
        if (a.alpha != "inf") {
            try {
                alpha = std::stod(a.alpha);
            } catch (const std::exception&) {
                throw std::invalid_argument("qfem: --alpha expects a number or 'inf'");
            }
        }
        res.ppl_fp = ppl_fp;
        res.exclusions.alpha_is_inf = std::isinf(alpha);
        res.exclusions.alpha = res.exclusions.alpha_is_inf ? 0.0 : alpha;
        res.exclusions.modules = select_unquantized(ratios, alpha);
        res.crossing_found = !res.exclusions.alpha_is_inf;
        res.ppl_full = eval({});
        res.ppl_star = eval(res.exclusions.modules);
    }

    write_json_artifact(a.out, exclusions_to_json(res, rep.modules, ratios, m.fingerprint,
                                                  man.inputs.at(a.calib)));
    man.seed = rep.corpus_seed;
    man.outputs = {a.out};
    if (!a.curve.empty()) {
        std::string csv = "alpha,ppl,n_unquantized\n";
        for (const auto& pt : res.curve)
            csv += fmt_double(pt.alpha) + "," + fmt_double(pt.ppl) + "," +
                   std::to_string(pt.n_unquantized) + "\n";
        write_file_text(a.curve, csv);
        man.outputs.push_back(a.curve);
    }
    write_manifests(man);

    std::cout << "wrote " << a.out << ": alpha = "
              << (res.exclusions.alpha_is_inf ? std::string("inf")
                                              : fmt_double(res.exclusions.alpha))
              << ", " << res.exclusions.modules.size() << " of " << ratios.size()
              << " modules excluded, ppl " << fmt_double(res.ppl_full) << " -> "
              << fmt_double(res.ppl_star) << " (fp " << fmt_double(res.ppl_fp) << ")\n";
    return 0;
}

// ---- qfep -------------------------------------------------------------------

struct QfepArgs {
    std::string model;
    std::string calib;
    double tau = 4.0;
    int32_t context_pool = 200;
    int32_t top_k = 3;
    bool no_context = false;
    int jobs = env_jobs();
    std::string out;
};

int run_qfep(const QfepArgs& a, RunManifest man) {
    const Model m = load_model_input(a.model, man);
    const CalibrationReport rep = load_calib_input(a.calib, m, man);

    PrefixSearchOptions opt;
    opt.tau = a.tau;
    opt.context_pool = a.context_pool;
    opt.top_k = a.top_k;
    opt.with_context = !a.no_context;
    opt.jobs = a.jobs;

    const auto candidates = find_candidate_tokens(rep, a.top_k);
    const PrefixResult res = search_prefix(m, rep, candidates, opt);

    std::string text;
    if (m.config.vocab_size == ToyTokenizer::kVocabSize) text = ToyTokenizer::decode(res.prefix);
    write_json_artifact(a.out, prefix_to_json(res, m.fingerprint, text));
    man.seed = rep.corpus_seed;
    man.outputs = {a.out};
    write_manifests(man);

    std::cout << "wrote " << a.out << ": prefix [";
    for (size_t i = 0; i < res.prefix.size(); ++i)
        std::cout << (i > 0 ? " " : "") << res.prefix[i];
    std::cout << "] spike ratio " << fmt_double(res.spike_ratio) << " at "
              << module_id_name(res.target_module) << "\n";
    return 0;
}

// ---- eval -------------------------------------------------------------------

struct EvalArgs {
    std::string model;
    std::string plan = "fp";
    std::string act_scheme = "per-token-dyn";
    std::string weight_scheme = "per-channel";
    bool bmm = false;
    std::string qfem;
    std::string qfep;
    std::string calib;  // needed by per-tensor-static
    CorpusArgs corpus;
    std::string metric = "ppl";
    int jobs = env_jobs();
    std::string out;
};

ExecutionPlan build_eval_plan(const EvalArgs& a, const Model& m, RunManifest& man,
                              size_t* n_excluded) {
    ExecutionPlan plan;
    if (a.plan == "w8a8") plan = w8a8_plan(parse_act_scheme(a.act_scheme), a.bmm);
    else if (a.plan == "w8a16") plan = w8a16_plan();
    if (a.plan != "fp") plan.weight_spec = parse_weight_scheme(a.weight_scheme);

    if (plan.act_spec.timing == Timing::static_scale && plan.default_mode == LinearMode::w8a8) {
        if (a.calib.empty())
            throw std::invalid_argument("eval: --act-scheme per-tensor-static needs --calib");
        apply_static_scales(plan, load_calib_input(a.calib, m, man));
    }

    if (!a.qfem.empty()) {
        man.add_input(a.qfem);
        const json j = json::parse(read_file_text(a.qfem));
        check_artifact_fingerprint(j, m, a.qfem);
        const auto excluded = exclusions_from_json(j);
        if (plan.default_mode == LinearMode::w8a8) {
            apply_exclusions(plan, excluded);
            *n_excluded = excluded.size();
        } else {
            std::cerr << "warning: --qfem only affects w8a8 plans; ignoring\n";
        }
    }
    plan.validate();
    return plan;
}

int run_eval(const EvalArgs& a, RunManifest man) {
    const Model m = load_model_input(a.model, man);
    size_t n_excluded = 0;
    const ExecutionPlan plan = build_eval_plan(a, m, man, &n_excluded);

    json corpus_desc;
    const auto corpus = resolve_corpus(m, a.corpus, man, corpus_desc);

    KVCache cache;
    EvalOptions eopt;
    eopt.jobs = a.jobs;
    json prefix_ids;
    if (!a.qfep.empty()) {
        man.add_input(a.qfep);
        const json j = json::parse(read_file_text(a.qfep));
        check_artifact_fingerprint(j, m, a.qfep);
        const PrefixResult res = prefix_from_json(j);
        cache = prepare_prefix_cache(m, res);
        check_prefix_capacity(m, cache, corpus);
        eopt.prefix = &cache;
        prefix_ids = res.prefix;
    }

    json result;
    result["model_fingerprint"] = m.fingerprint;
    result["corpus"] = corpus_desc;
    result["plan"] = {{"mode", a.plan},
                      {"act_scheme", a.plan == "w8a8" ? a.act_scheme : "none"},
                      {"weight_scheme", a.plan == "fp" ? "none" : a.weight_scheme},
                      {"bmm", a.bmm},
                      {"n_excluded", n_excluded}};
    if (!prefix_ids.is_null()) result["prefix"] = prefix_ids;

    const PreparedPlan pp = PreparedPlan::prepare(m, plan);
    if (a.metric == "ppl" || a.metric == "both") {
        const PplResult r = perplexity(m, pp, corpus, eopt);
        result["ppl"] = r.ppl;
        result["mean_nll"] = r.mean_nll;
        result["tokens_scored"] = r.tokens_scored;
        std::cout << "ppl " << fmt_double(r.ppl) << " over " << r.tokens_scored << " tokens\n";
    }
    if (a.metric == "mse" || a.metric == "both") {
        const double mse = last_hidden_mse(m, PreparedPlan::prepare_fp(m), pp, corpus, eopt);
        result["last_hidden_mse"] = mse;
        std::cout << "last-hidden mse " << fmt_double(mse) << "\n";
    }

    write_json_artifact(a.out, result);
    man.seed = a.corpus.seed;
    man.outputs = {a.out};
    write_manifests(man);
    return 0;
}

// ---- bench ------------------------------------------------------------------

struct BenchArgs {
    std::string model;
    std::vector<std::string> plans;
    std::string calib;
    int32_t seqlen = 64;
    int reps = 5;
    std::string out;
};

std::pair<std::string, ExecutionPlan> parse_bench_plan(const std::string& token, const Model& m,
                                                       const std::string& calib_path,
                                                       RunManifest& man) {
    const size_t colon = token.find(':');
    const std::string head = token.substr(0, colon);
    if (head == "fp") {
        if (colon != std::string::npos)
            throw std::invalid_argument("bench: plan '" + token + "' takes no scheme");
        return {token, ExecutionPlan::fp()};
    }
    if (head == "w8a16") {
        if (colon != std::string::npos)
            throw std::invalid_argument("bench: plan '" + token + "' takes no scheme");
        return {token, w8a16_plan()};
    }
    if (head != "w8a8")
        throw std::invalid_argument("bench: unknown plan '" + token +
                                    "' (fp, w8a16, w8a8[:act-scheme])");
    const std::string scheme =
        colon == std::string::npos ? "per-tensor-dyn" : token.substr(colon + 1);
    ExecutionPlan plan = w8a8_plan(parse_act_scheme(scheme));
    if (plan.act_spec.timing == Timing::static_scale) {
        if (calib_path.empty())
            throw std::invalid_argument("bench: plan '" + token + "' needs --calib");
        apply_static_scales(plan, load_calib_input(calib_path, m, man));
    }
    return {head + ":" + scheme, plan};
}

int run_bench(const BenchArgs& a, RunManifest man) {
    const Model m = load_model_input(a.model, man);
    std::vector<std::pair<std::string, ExecutionPlan>> plans;
    for (const std::string& tok : a.plans)
        plans.push_back(parse_bench_plan(tok, m, a.calib, man));

    const auto results = bench(m, plans, a.seqlen, a.reps);

    json jplans = json::array();
    for (const auto& r : results) {
        jplans.push_back({{"plan", r.plan_name},
                          {"median_ms", r.median_ms},
                          {"per_rep_ms", r.per_rep_ms},
                          {"logits_fingerprint", to_hex64(r.logits_fingerprint)},
                          {"tokens", r.tokens}});
        std::cout << r.plan_name << ": median " << fmt_double(r.median_ms) << " ms over "
                  << a.reps << " reps\n";
    }
    const json result = {{"model_fingerprint", m.fingerprint},
                         {"seqlen", a.seqlen},
                         {"reps", a.reps},
                         {"peak_rss_delta_kb", results.front().peak_rss_delta_kb},
                         {"plans", jplans}};
    write_json_artifact(a.out, result);
    man.outputs = {a.out};
    write_manifests(man);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Desk-scale lab for activation-spike quantization experiments"};
    app.require_subcommand(1);

    GenArgs ga;
    CLI::App* gen = app.add_subcommand("genmodel", "Synthesize a spike-bearing checkpoint");
    gen->add_option("--layers", ga.layers)->capture_default_str();
    gen->add_option("--dim", ga.dim)->capture_default_str();
    gen->add_option("--heads", ga.heads)->capture_default_str();
    gen->add_option("--dff", ga.dff)->capture_default_str();
    gen->add_option("--ffn", ga.ffn, "swiglu, geglu or plain")
        ->check(CLI::IsMember({"swiglu", "geglu", "plain"}))
        ->capture_default_str();
    gen->add_option("--spike-mode", ga.spike_mode,
                    "first (spike on first occurrence), static (every occurrence), none")
        ->check(CLI::IsMember({"first", "static", "none"}))
        ->capture_default_str();
    gen->add_option("--spike-layer", ga.spike_layer)->capture_default_str();
    gen->add_option("--spike-token", ga.spike_token)->capture_default_str();
    gen->add_option("--target-ratio", ga.target_ratio)->capture_default_str();
    gen->add_option("--seed", ga.seed)->capture_default_str();
    gen->add_option("--out", ga.out, "Output checkpoint path")->required();

    CalibrateArgs ca;
    CLI::App* cal = app.add_subcommand("calibrate", "Record per-module token scales");
    cal->add_option("--model", ca.model)->required();
    add_corpus_flags(cal, ca.corpus);
    cal->add_option("--jobs", ca.jobs)->capture_default_str();
    cal->add_option("--out", ca.out, "Output calibration JSON")->required();

    AnalyzeArgs an;
    CLI::App* ana = app.add_subcommand("analyze", "Per-module max/median/ratio CSV");
    ana->add_option("--calib", an.calib)->required();
    ana->add_option("--out", an.out, "Output CSV path")->required();

    QfemArgs qa;
    CLI::App* qm = app.add_subcommand(
        "qfem", "Select modules to exclude from activation quantization");
    qm->add_option("--model", qa.model)->required();
    qm->add_option("--calib", qa.calib)->required();
    qm->add_flag("--search-alpha", qa.search_alpha,
                 "Search the threshold over observed ratios");
    qm->add_option("--alpha", qa.alpha, "Fixed threshold (number or 'inf')");
    qm->add_option("--curve", qa.curve, "Also write the threshold/perplexity curve CSV");
    qm->add_option("--jobs", qa.jobs)->capture_default_str();
    qm->add_option("--out", qa.out, "Output exclusion set JSON")->required();

    QfepArgs qp;
    CLI::App* qf = app.add_subcommand("qfep", "Search a spike-absorbing prefix");
    qf->add_option("--model", qp.model)->required();
    qf->add_option("--calib", qp.calib)->required();
    qf->add_option("--tau", qp.tau, "Spike threshold on scale over median")
        ->capture_default_str();
    qf->add_option("--context-pool", qp.context_pool, "Most frequent tokens tried as context")
        ->capture_default_str();
    qf->add_option("--top-k", qp.top_k, "Candidate tokens tried in rank order")
        ->capture_default_str();
    qf->add_flag("--no-context", qp.no_context, "Search a length-2 prefix without context token");
    qf->add_option("--jobs", qp.jobs)->capture_default_str();
    qf->add_option("--out", qp.out, "Output prefix JSON")->required();

    EvalArgs ea;
    CLI::App* ev = app.add_subcommand("eval", "Perplexity / last-hidden MSE under a plan");
    ev->add_option("--model", ea.model)->required();
    ev->add_option("--plan", ea.plan, "fp, w8a8 or w8a16")
        ->check(CLI::IsMember({"fp", "w8a8", "w8a16"}))
        ->capture_default_str();
    ev->add_option("--act-scheme", ea.act_scheme,
                   "Activation quantization: per-token-dyn (AQ1), per-tensor-dyn (AQ2), "
                   "per-tensor-static (AQ3)")
        ->check(CLI::IsMember({"per-token-dyn", "per-tensor-dyn", "per-tensor-static"}))
        ->capture_default_str();
    ev->add_option("--weight-scheme", ea.weight_scheme)
        ->check(CLI::IsMember({"per-channel", "per-tensor"}))
        ->capture_default_str();
    ev->add_flag("--bmm", ea.bmm, "Also quantize attention batched matmuls");
    ev->add_option("--qfem", ea.qfem, "Exclusion set JSON; excluded modules run w8a16");
    ev->add_option("--qfep", ea.qfep,
                   "Prefix JSON; evaluate behind its full-precision KV cache "
                   "(samples drop their own BOS)");
    ev->add_option("--calib", ea.calib, "Calibration JSON (required for per-tensor-static)");
    add_corpus_flags(ev, ea.corpus);
    ev->add_option("--metric", ea.metric, "ppl, mse or both")
        ->check(CLI::IsMember({"ppl", "mse", "both"}))
        ->capture_default_str();
    ev->add_option("--jobs", ea.jobs)->capture_default_str();
    ev->add_option("--out", ea.out, "Output result JSON")->required();

    BenchArgs ba;
    CLI::App* be = app.add_subcommand("bench", "Median forward latency per plan");
    be->add_option("--model", ba.model)->required();
    be->add_option("--plan", ba.plans, "Repeatable: fp, w8a16, w8a8[:act-scheme]")->required();
    be->add_option("--calib", ba.calib, "Calibration JSON (required for static schemes)");
    be->add_option("--seqlen", ba.seqlen)->capture_default_str();
    be->add_option("--reps", ba.reps)->capture_default_str();
    be->add_option("--out", ba.out, "Output bench JSON")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    RunManifest man;
    man.argv.assign(argv, argv + argc);
    man.command = app.get_subcommands().front()->get_name();

    try {
        if (gen->parsed()) return run_genmodel(ga, std::move(man));
        if (cal->parsed()) return run_calibrate(ca, std::move(man));
        if (ana->parsed()) return run_analyze(an, std::move(man));
        if (qm->parsed()) return run_qfem(qa, std::move(man));
        if (qf->parsed()) return run_qfep(qp, std::move(man));
        if (ev->parsed()) return run_eval(ea, std::move(man));
        if (be->parsed()) return run_bench(ba, std::move(man));
    } catch (const FingerprintMismatch& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const QfepInapplicable& e) {
        std::cerr << "qfep inapplicable: " << e.what() << "\n";
        return 4;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
