#pragma once

#include <chrono>
#include <filesystem>
#include <string>
#include <vector>

#include "dosfl/attack.hpp"
#include "dosfl/bundle.hpp"
#include "dosfl/config.hpp"
#include "dosfl/cost_model.hpp"

// Subcommand orchestration shared by the CLI and the acceptance suite: builds
// datasets from the task config, runs the requested experiment, and writes a
// reproducible result bundle.

namespace dosfl {

template <typename T>
struct TaskData {
    LabeledDataset<T> train, test;
};

namespace detail {

inline std::string pick_existing(const std::string& dir, std::vector<std::string> names) {
    for (const auto& n : names)
        if (std::filesystem::exists(dir + "/" + n)) return dir + "/" + n;
    return dir + "/" + names.front();
}

} // namespace detail

// Materializes the train/test pair for a task. The glyph corpus is generated,
// exported as IDX files under the bundle, and read back through load_idx so
// synthetic runs exercise the same ingestion path as real MNIST.
template <typename T>
TaskData<T> load_task(const ExperimentConfig& cfg, BundleWriter* bundle) {
    const TaskConfig& t = cfg.task;
    if (t.id == "blobs") {
        return {make_blobs<T>(t.count, t.classes, t.dim, t.separation,
                              Rng::derive(cfg.seed, 101)),
                make_blobs<T>(t.test_count, t.classes, t.dim, t.separation,
                              Rng::derive(cfg.seed, 102))};
    }
    if (t.id == "glyphs") {
        if (!bundle) throw ConfigError("glyph task needs an output bundle for its IDX files");
        std::filesystem::create_directories(bundle->path_of("data"));
        const RawImages train_img = make_glyphs(t.count, Rng::derive(cfg.seed, 103));
        const RawImages test_img = make_glyphs(t.test_count, Rng::derive(cfg.seed, 104));
        save_idx(train_img, bundle->path_of("data/glyphs-train-images.idx"),
                 bundle->path_of("data/glyphs-train-labels.idx"));
        save_idx(test_img, bundle->path_of("data/glyphs-test-images.idx"),
                 bundle->path_of("data/glyphs-test-labels.idx"));
        for (const char* name : {"data/glyphs-train-images.idx", "data/glyphs-train-labels.idx",
                                 "data/glyphs-test-images.idx", "data/glyphs-test-labels.idx"})
            bundle->track_file(name);
        return {load_idx<T>(bundle->path_of("data/glyphs-train-images.idx"),
                            bundle->path_of("data/glyphs-train-labels.idx"), t.train_limit,
                            t.n_cls),
                load_idx<T>(bundle->path_of("data/glyphs-test-images.idx"),
                            bundle->path_of("data/glyphs-test-labels.idx"), t.test_limit,
                            t.n_cls)};
    }
    if (t.id == "mnist") {
        const std::string ti = detail::pick_existing(
            t.dir, {"train-images-idx3-ubyte", "train-images.idx3-ubyte"});
        const std::string tl = detail::pick_existing(
            t.dir, {"train-labels-idx1-ubyte", "train-labels.idx1-ubyte"});
        const std::string ei =
            detail::pick_existing(t.dir, {"t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"});
        const std::string el =
            detail::pick_existing(t.dir, {"t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"});
        return {load_idx<T>(ti, tl, t.train_limit, t.n_cls),
                load_idx<T>(ei, el, t.test_limit, t.n_cls)};
    }
    if (t.id == "idx") {
        return {load_idx<T>(t.train_images, t.train_labels, t.train_limit, t.n_cls),
                load_idx<T>(t.test_images, t.test_labels, t.test_limit, t.n_cls)};
    }
    throw ConfigError("unknown task id '" + t.id + "'");
}

namespace detail {

template <typename T>
void write_fed_bundle(BundleWriter& bundle, const ArchitectureSpec& arch,
                      const RunOutput<T>& out, bool keep_distilled) {
    bundle.add_json("report.json", report_to_json(out.report));
    bundle.add_text("trace.csv", trace_csv(out.report.trace));
    save_params(out.theta_final, bundle.path_of("theta_final.bin"));
    bundle.track_file("theta_final.bin");
    if (keep_distilled) {
        for (const auto& d : out.distilled) {
            const std::string name = "distilled_client_" + std::to_string(d.client_id) + ".bin";
            save_distilled(d, bundle.path_of(name));
            bundle.track_file(name);
        }
    }
    (void)arch;
}

inline std::string cost_table3_csv() {
    std::string csv =
        "dataset,model,n_data,n_cls,distill_steps,distill_batch,participation,model_size,"
        "printed,recomputed_eq5,recomputed_raw,delta_eq5,delta_raw,matched_form\n";
    for (const auto& row : break_even_table()) {
        CostModelInput in;
        in.clients = 100;
        in.participation = row.participation;
        in.model_size = row.model_size;
        in.distill_steps = row.distill_steps;
        in.distill_batch = row.distill_batch;
        in.n_data = row.n_data;
        in.n_cls = row.n_cls;
        const Rational eq5 = break_even(in);
        const Rational raw = break_even_raw(in);
        const double printed = Rational::from_decimal(row.printed).to_double();
        const double d5 = eq5.to_double() - printed;
        const double dr = raw.to_double() - printed;
        std::string form = "none";
        if (std::abs(d5) <= 0.01) form = "eq5";
        else if (std::abs(dr) <= 0.011) form = "raw";
        csv += row.dataset + "," + row.model + "," + std::to_string(row.n_data) + "," +
               std::to_string(row.n_cls) + "," + std::to_string(row.distill_steps) + "," +
               std::to_string(row.distill_batch) + "," + row.participation.to_decimal(2) + "," +
               std::to_string(row.model_size) + "," + row.printed + "," + eq5.to_decimal(2) +
               "," + raw.to_decimal(2) + "," + fmt_double(d5) + "," + fmt_double(dr) + "," +
               form + "\n";
    }
    return csv;
}

inline std::string cost_table4_csv() {
    std::string csv =
        "dataset,model,clients,printed_ratio,printed_reduction_pct,recomputed_reduction_pct,"
        "delta_pct\n";
    for (const auto& row : iso_table()) {
        const Rational ratio = Rational::from_decimal(row.printed_ratio);
        const Rational red_pct = reduction_from_ratio(ratio) * Rational(100);
        std::string delta;
        if (!row.printed_reduction.empty()) {
            const double d =
                red_pct.to_double() - Rational::from_decimal(row.printed_reduction).to_double();
            delta = fmt_double(d);
        }
        csv += row.dataset + "," + row.model + "," + std::to_string(row.clients) + "," +
               row.printed_ratio + "," + row.printed_reduction + "," + red_pct.to_decimal(2) +
               "," + delta + "\n";
    }
    return csv;
}

inline std::string cost_config_csv(const ExperimentConfig& cfg) {
    const ArchitectureSpec arch = cfg.arch_spec();
    CostModelInput in;
    in.clients = cfg.cost.clients;
    in.participation = Rational::from_decimal(cfg.cost.participation);
    in.model_size = param_count(arch);
    in.distill_steps = cfg.federation.distill.distill_steps;
    in.distill_batch = cfg.federation.distill.distill_batch;
    in.n_data = arch.input_numel();
    in.n_cls = arch.n_cls;
    in.rounds = cfg.cost.rounds;
    const IsoResult iso = iso_ratio_and_reduction(in);
    std::string csv =
        "clients,participation,model_size,distill_steps,distill_batch,n_data,n_cls,rounds,"
        "tcc_dosfl,tcc_fedavg,break_even_eq5,break_even_raw,ratio,reduction_pct\n";
    csv += std::to_string(in.clients) + "," + in.participation.to_fraction() + "," +
           std::to_string(in.model_size) + "," + std::to_string(in.distill_steps) + "," +
           std::to_string(in.distill_batch) + "," + std::to_string(in.n_data) + "," +
           std::to_string(in.n_cls) + "," + std::to_string(in.rounds) + "," +
           tcc_dosfl(in).to_decimal(0) + "," + tcc_fedavg(in).to_decimal(2) + "," +
           break_even(in).to_decimal(2) + "," + break_even_raw(in).to_decimal(2) + "," +
           iso.ratio.to_fraction() + "," + (iso.reduction * Rational(100)).to_decimal(2) + "\n";
    return csv;
}

template <typename T>
void run_attack_cmd(const ExperimentConfig& cfg, BundleWriter& bundle) {
    const ArchitectureSpec arch = cfg.arch_spec();
    TaskData<T> data = load_task<T>(cfg, &bundle);
    std::vector<AttackSource<T>> sources;
    nlohmann::ordered_json seeds;
    ParamVector<T> legit_theta0;
    std::vector<DistilledStep<T>> legit_seq;
    for (InitMethod m : all_init_methods()) {
        FederationConfig fed = cfg.federation;
        fed.mode = FedMode::Dosfl;
        fed.init = m;
        RunOutput<T> out = run_dosfl(arch, data.train, data.test, fed);
        AttackSource<T> src;
        src.method = m;
        src.legit_init_seed = Rng::derive(fed.seed, seed_stream::kInit);
        src.seq = merge(out.distilled);
        src.distill_epochs = fed.distill.distill_epochs;
        src.legitimate_accuracy = out.report.final_accuracy;
        if (m == cfg.federation.init) {
            legit_theta0 = init_params<T>(arch, m, src.legit_init_seed);
            legit_seq = src.seq;
        }
        seeds[std::string("init_seed_") + to_string(m)] = src.legit_init_seed;
        sources.push_back(std::move(src));
    }
    AttackReport rep =
        attack_matrix<T>(arch, sources, data.test, cfg.attack.trials, Rng::derive(cfg.seed, 300));
    auto curve = attack_distance_curve<T>(arch, legit_theta0, legit_seq,
                                          cfg.federation.distill.distill_epochs,
                                          cfg.attack.k_values, data.test, cfg.attack.trials,
                                          Rng::derive(cfg.seed, 301));

    std::string matrix = "source_method,legitimate";
    for (InitMethod m : rep.methods) matrix += std::string(",") + to_string(m);
    matrix += "\n";
    for (size_t s = 0; s < sources.size(); ++s) {
        matrix += std::string(to_string(sources[s].method)) + "," + fmt_double(rep.legitimate[s]);
        for (size_t a = 0; a < rep.methods.size(); ++a)
            matrix += "," + fmt_double(rep.matrix[s][a].mean);
        matrix += "\n";
    }
    bundle.add_text("attack_matrix.csv", matrix);

    std::string stats = "source_method,attack_method,mean,min,max\n";
    for (size_t s = 0; s < sources.size(); ++s)
        for (size_t a = 0; a < rep.methods.size(); ++a)
            stats += std::string(to_string(sources[s].method)) + "," + to_string(rep.methods[a]) +
                     "," + fmt_double(rep.matrix[s][a].mean) + "," +
                     fmt_double(rep.matrix[s][a].min) + "," + fmt_double(rep.matrix[s][a].max) +
                     "\n";
    bundle.add_text("attack_matrix_stats.csv", stats);

    std::string curve_csv = "k,mean,min,max\n";
    for (const auto& [k, cell] : curve)
        curve_csv += fmt_double(k) + "," + fmt_double(cell.mean) + "," + fmt_double(cell.min) +
                     "," + fmt_double(cell.max) + "\n";
    bundle.add_text("attack_curve.csv", curve_csv);

    for (uint64_t s : rep.trial_seeds) seeds["trial_seeds"].push_back(s);
    seeds["matrix_seed"] = Rng::derive(cfg.seed, 300);
    seeds["curve_seed"] = Rng::derive(cfg.seed, 301);
    bundle.add_json("attack_seeds.json", seeds);
}

template <typename T>
void run_sweep_cmd(const ExperimentConfig& cfg, BundleWriter& bundle) {
    if (cfg.sweep.values.empty()) throw ConfigError("sweep.values must be nonempty");
    const ArchitectureSpec arch = cfg.arch_spec();
    TaskData<T> data = load_task<T>(cfg, &bundle);
    std::string csv = "axis,value,final_accuracy,scalars_uploaded\n";
    for (int64_t v : cfg.sweep.values) {
        FederationConfig fed = cfg.federation;
        fed.mode = FedMode::Dosfl;
        if (cfg.sweep.axis == "shards") {
            fed.partition = PartitionMode::Shards;
            fed.shards_per_client = v;
        } else {
            fed.clients = v;
        }
        RunOutput<T> out = run_dosfl(arch, data.train, data.test, fed);
        csv += cfg.sweep.axis + "," + std::to_string(v) + "," +
               fmt_double(out.report.final_accuracy) + "," +
               std::to_string(out.report.scalars_uploaded) + "\n";
    }
    bundle.add_text("sweep.csv", csv);
}

template <typename T>
void run_typed(const ExperimentConfig& cfg, const std::string& sub, BundleWriter& bundle) {
    const ArchitectureSpec arch = cfg.arch_spec();
    if (sub == "distill") {
        TaskData<T> data = load_task<T>(cfg, &bundle);
        ParamVector<T> theta0 =
            init_params<T>(arch, cfg.federation.init, Rng::derive(cfg.seed, seed_stream::kInit));
        DistillTrace trace;
        DistilledDataset<T> ds = distill(arch, data.train, theta0, cfg.federation.distill,
                                         client_seed(cfg.seed, 0), &trace);
        save_distilled(ds, bundle.path_of("distilled.bin"));
        bundle.track_file("distilled.bin");
        bundle.add_json("distilled.json", distilled_to_json(ds));
        ParamVector<T> replayed = unroll(arch, theta0, ds, cfg.federation.distill.distill_epochs);
        nlohmann::ordered_json rep;
        rep["untrained_accuracy"] = evaluate(arch, theta0, data.test).accuracy;
        rep["replay_accuracy"] = evaluate(arch, replayed, data.test).accuracy;
        rep["scalars_uploaded"] = ds.upload_scalars();
        bundle.add_json("report.json", rep);
        std::string loss = "meta_iteration,outer_loss\n";
        for (size_t i = 0; i < trace.outer_loss.size(); ++i)
            loss += std::to_string(i) + "," + fmt_double(trace.outer_loss[i]) + "\n";
        bundle.add_text("loss.csv", loss);
    } else if (sub == "dosfl" || sub == "lp-dosfl" || sub == "fedavg") {
        TaskData<T> data = load_task<T>(cfg, &bundle);
        FederationConfig fed = cfg.federation;
        fed.mode = fed_mode_from_string(sub);
        RunOutput<T> out;
        if (fed.mode == FedMode::Dosfl) out = run_dosfl(arch, data.train, data.test, fed);
        else if (fed.mode == FedMode::LpDosfl) out = run_lp_dosfl(arch, data.train, data.test, fed);
        else out = run_fedavg(arch, data.train, data.test, fed);
        write_fed_bundle(bundle, arch, out, fed.mode != FedMode::FedAvg);
    } else if (sub == "attack") {
        run_attack_cmd<T>(cfg, bundle);
    } else if (sub == "sweep") {
        run_sweep_cmd<T>(cfg, bundle);
    } else {
        throw ConfigError("unknown subcommand '" + sub + "'");
    }
}

} // namespace detail

// Runs one subcommand into `outdir` and finalizes the bundle manifest.
inline void run_subcommand(const ExperimentConfig& cfg, const std::string& sub,
                           const std::string& outdir) {
    const auto t0 = std::chrono::steady_clock::now();
    BundleWriter bundle(outdir);
    bundle.add_json("config.json", config_to_json(cfg));
    if (sub == "cost") {
        bundle.add_text("table3.csv", detail::cost_table3_csv());
        bundle.add_text("table4.csv", detail::cost_table4_csv());
        bundle.add_text("cost.csv", detail::cost_config_csv(cfg));
    } else if (cfg.precision == 64) {
        detail::run_typed<double>(cfg, sub, bundle);
    } else {
        detail::run_typed<float>(cfg, sub, bundle);
    }
    bundle.add_timings(
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    bundle.finalize();
}

inline const std::vector<std::string>& all_subcommands() {
    static const std::vector<std::string> subs = {"distill", "dosfl",  "lp-dosfl", "fedavg",
                                                  "cost",    "attack", "sweep"};
    return subs;
}

} // namespace dosfl
