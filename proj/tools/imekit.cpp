#include <csignal>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "imekit/imekit.hpp"

namespace {

imekit::Service * g_service = nullptr;

void on_signal(int) {
    if (g_service) g_service->stop();
}

int cmd_bench(const std::vector<std::size_t> & lengths, int reps, int decode, std::uint64_t seed, const std::string & plot_path,
              int ffn) {
    imekit::BenchConfig cfg;
    cfg.lengths = lengths;
    cfg.repetitions = reps;
    cfg.decode_tokens = decode;
    cfg.seed = seed;
    if (ffn > 0) cfg.model.ffn_dim = ffn;
    const auto rep = imekit::bench(cfg);
    std::cout << rep.table();
    if (!plot_path.empty()) {
        std::ofstream os(plot_path, std::ios::trunc);
        for (const auto & line : rep.plot_lines()) os << line << '\n';
    }
    return 0;
}

int cmd_score(const std::string & in, const std::string & out) {
    std::ifstream file;
    std::istream * is = &std::cin;
    if (!in.empty() && in != "-") {
        file.open(in);
        if (!file) throw imekit::Error(imekit::ErrorCode::io, "cannot open " + in);
        is = &file;
    }
    std::ofstream ofile;
    std::ostream * os = &std::cout;
    if (!out.empty() && out != "-") {
        ofile.open(out, std::ios::trunc);
        os = &ofile;
    }
    for (std::string line; std::getline(*is, line);) {
        if (imekit::trim(line).empty()) continue;
        auto rec = nlohmann::json::parse(line);
        auto scored = imekit::score_record(rec);
        if (rec.contains("id")) scored["id"] = rec["id"];
        *os << scored.dump() << '\n';
    }
    return 0;
}

} // namespace

int main(int argc, char ** argv) {
    CLI::App app{"imekit: on-device input-method engine toolkit"};
    app.require_subcommand(1);

    auto * bench = app.add_subcommand("bench", "throughput, TTFC and KV-size sweep on the reference model");
    std::vector<std::size_t> lengths = {64, 128, 256, 384, 512};
    int reps = 3, decode = 64, ffn = 0;
    std::uint64_t bench_seed = 1;
    std::string plot_path;
    bench->add_option("--lengths", lengths, "context lengths");
    bench->add_option("--reps", reps, "repetitions per length (median reported)");
    bench->add_option("--decode-tokens", decode, "decoded tokens per run");
    bench->add_option("--seed", bench_seed, "context seed");
    bench->add_option("--ffn", ffn, "override the bench model's FFN width");
    bench->add_option("--plot", plot_path, "write line-delimited plot data here");

    auto * gen = app.add_subcommand("gen-dataset", "write the seeded synthetic evaluation dataset");
    std::uint64_t ds_seed = 7;
    std::string ds_dir = "dataset";
    imekit::DatasetCounts counts;
    gen->add_option("--seed", ds_seed);
    gen->add_option("--out", ds_dir, "output directory");
    gen->add_option("--trigger", counts.trigger);
    gen->add_option("--normal", counts.normal);
    gen->add_option("--refusal", counts.refusal);
    gen->add_option("--retrieval", counts.retrieval);

    auto * eval = app.add_subcommand("eval", "memory pipeline report on the template backend");
    std::string eval_dir;
    std::uint64_t eval_seed = 7;
    bool eval_json = false;
    eval->add_option("--dataset", eval_dir, "dataset directory (generated from --seed when omitted)");
    eval->add_option("--seed", eval_seed);
    eval->add_flag("--json", eval_json, "print the report as JSON");

    auto * score = app.add_subcommand("score", "reward scoring of {\"class\",\"output\"} JSONL records");
    std::string score_in = "-", score_out = "-";
    score->add_option("input", score_in, "input file or - for stdin");
    score->add_option("-o,--out", score_out, "output file or - for stdout");

    auto * serve = app.add_subcommand("serve", "run the loopback protocol server");
    std::string serve_cfg, backend = "template", facts, trajectories;
    bool threaded = false;
    serve->add_option("--config", serve_cfg, "JSON service config (host, port, debounce_ms, idle_curation_ms)");
    serve->add_option("--backend", backend, "template or reference")->check(CLI::IsMember({"template", "reference"}));
    serve->add_option("--facts", facts, "fact store file");
    serve->add_option("--trajectories", trajectories, "trajectory log file");
    serve->add_flag("--background-curation", threaded, "run curation on a dedicated thread");

    auto * fixture = app.add_subcommand("fixture", "write the reference-model weight and logit fixture");
    std::string fixture_out = "reference_model.json";
    fixture->add_option("-o,--out", fixture_out);

    CLI11_PARSE(app, argc, argv);

    try {
        if (*bench) return cmd_bench(lengths, reps, decode, bench_seed, plot_path, ffn);
        if (*gen) {
            const auto ds = imekit::gen_dataset(ds_seed, counts);
            imekit::write_dataset(ds, ds_dir);
            std::cout << "wrote " << ds.total_cases() << " cases to " << ds_dir << '\n';
            return 0;
        }
        if (*eval) {
            const auto ds = eval_dir.empty() ? imekit::gen_dataset(eval_seed) : imekit::read_dataset(eval_dir);
            const auto rep = imekit::eval_pipeline(ds);
            if (eval_json) {
                std::cout << rep.to_json().dump(2) << '\n';
            } else {
                std::cout << rep.table();
            }
            return 0;
        }
        if (*score) return cmd_score(score_in, score_out);
        if (*fixture) {
            imekit::write_fixture(fixture_out, imekit::model_fixture(imekit::ModelConfig{}));
            return 0;
        }
        if (*serve) {
            imekit::ServiceConfig sc;
            if (!serve_cfg.empty()) {
                std::ifstream is(serve_cfg);
                if (!is) throw imekit::Error(imekit::ErrorCode::io, "cannot open " + serve_cfg);
                sc.apply_json(nlohmann::json::parse(is));
            }
            sc.apply_env();
            imekit::EngineConfig ec;
            ec.facts_path = facts;
            ec.trajectory_path = trajectories;
            ec.background_thread = threaded;
            auto model = backend == "reference" ? imekit::build_reference_model(imekit::ModelConfig{})
                                                : imekit::build_default_template_model();
            imekit::Engine engine(model, ec);
            imekit::Service service(engine, sc);
            g_service = &service;
            std::signal(SIGINT, on_signal);
            std::signal(SIGTERM, on_signal);
            std::cerr << "listening on " << sc.host << ":" << sc.port << '\n';
            if (!service.listen()) {
                std::cerr << "cannot bind " << sc.host << ":" << sc.port << '\n';
                return 1;
            }
            return 0;
        }
    } catch (const std::exception & e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
