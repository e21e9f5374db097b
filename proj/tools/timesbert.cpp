// timesbert: pretrain, finetune, eval, export and gen-data from the command line.
//
// Exit codes: 0 ok, 1 config error, 2 data error, 3 numeric divergence.

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "timesbert/checkpoint.hpp"
#include "timesbert/eval.hpp"
#include "timesbert/heads.hpp"
#include "timesbert/presets.hpp"
#include "timesbert/pretrain.hpp"

using namespace timesbert;

namespace {

constexpr int kExitConfig = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;

const std::vector<double> kDefaultQuantiles{0.90, 0.95, 0.97, 0.98, 0.99, 0.995, 0.999};

struct Options {
    std::string config, out, data, synthetic, task, from, which = "pooled", quantile_grid;
    std::uint64_t seed = 0;
    std::optional<std::size_t> steps, batch_size, patch_len, d_model, layers, heads, context_len, save_every;
    std::optional<double> mask_ratio;
    bool freeze_backbone = false;
    CLI::Option* freeze_opt = nullptr;
    CLI::Option* seed_opt = nullptr;
};

void add_common(CLI::App& cmd, Options& o) {
    cmd.add_option("--config", o.config, "key = value config file; flags override it");
    o.seed_opt = cmd.add_option("--seed", o.seed, "run seed");
    cmd.add_option("--out", o.out, "output path");
    cmd.add_option("--data", o.data, "data directory written by gen-data");
    cmd.add_option("--synthetic", o.synthetic, "synthetic preset: default|classify|impute|anomaly|forecast");
    cmd.add_option("--steps", o.steps, "training steps");
    cmd.add_option("--batch-size", o.batch_size, "samples per step");
    cmd.add_option("--patch-len", o.patch_len, "patch length P");
    cmd.add_option("--d-model", o.d_model, "hidden size D");
    cmd.add_option("--layers", o.layers, "encoder layers L");
    cmd.add_option("--heads", o.heads, "attention heads A");
    cmd.add_option("--context-len", o.context_len, "packed context length in tokens");
    cmd.add_option("--mask-ratio", o.mask_ratio, "masking ratio");
    cmd.add_option("--save-every", o.save_every, "checkpoint period in steps (0 = final only)");
    cmd.add_option("--task", o.task, "classify|impute|anomaly|forecast");
    cmd.add_option("--from", o.from, "checkpoint to start from ('random' for a fresh init)");
    o.freeze_opt = cmd.add_flag("--freeze-backbone", o.freeze_backbone, "train only the task head");
    cmd.add_option("--quantile-grid", o.quantile_grid, "comma-separated anomaly threshold quantiles");
    cmd.add_option("--which", o.which, "representation to export: dom|var|pooled");
}

/// Config file, then flags. `prefix` is "pretrain." or "finetune." for the
/// training keys.
KeyValueConfig effective_config(const Options& o, const std::string& prefix) {
    KeyValueConfig kv = o.config.empty() ? KeyValueConfig{} : KeyValueConfig::load(o.config);
    if (o.seed_opt->count() || !kv.has("seed")) kv.set("seed", static_cast<std::size_t>(o.seed));
    if (o.d_model) kv.set("d_model", *o.d_model);
    if (o.layers) kv.set("n_layers", *o.layers);
    if (o.heads) kv.set("n_heads", *o.heads);
    if (o.context_len) kv.set("context_len", *o.context_len);
    if (o.patch_len) kv.set("patch_len", *o.patch_len);
    if (o.steps) kv.set(prefix + "steps", *o.steps);
    if (o.batch_size) kv.set(prefix + "batch_size", *o.batch_size);
    if (o.mask_ratio) kv.set(prefix + "mask_ratio", *o.mask_ratio);
    if (o.save_every) kv.set("pretrain.save_every", *o.save_every);
    if (!o.task.empty()) kv.set("finetune.task", o.task);
    if (o.freeze_opt->count()) kv.set("finetune.freeze_backbone", o.freeze_backbone);
    if (!o.synthetic.empty()) kv.set("data.synthetic", o.synthetic);
    if (!o.data.empty()) kv.set("data.dir", o.data);
    if (!o.quantile_grid.empty()) kv.set("eval.quantile_grid", o.quantile_grid);
    return kv;
}

std::uint64_t run_seed(const KeyValueConfig& kv) { return kv.get_size("seed", 0); }

TaskSplits load_data(const KeyValueConfig& kv, const std::string& default_preset) {
    const std::string dir = kv.get_string("data.dir", "");
    if (!dir.empty()) return read_task_data(dir);
    const std::uint64_t data_seed = kv.get_size("data.seed", run_seed(kv));
    return synthetic_preset(kv.get_string("data.synthetic", default_preset), data_seed);
}

std::vector<double> parse_grid(const std::string& text) {
    if (text.empty()) return kDefaultQuantiles;
    std::vector<double> grid;
    std::stringstream ss(text);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
        try {
            std::size_t used = 0;
            const double q = std::stod(cell, &used);
            if (used != cell.size() || q < 0.0 || q > 1.0) throw std::invalid_argument(cell);
            grid.push_back(q);
        } catch (const std::exception&) {
            throw ConfigError("--quantile-grid: '" + cell + "' is not a quantile in [0, 1]");
        }
    }
    if (grid.empty()) throw ConfigError("--quantile-grid is empty");
    return grid;
}

nlohmann::json config_json(const KeyValueConfig& kv) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [k, v] : kv.entries()) j[k] = v;
    return j;
}

void emit(MetricReport r, const KeyValueConfig& kv, const std::string& split_name, const std::string& path) {
    r.config["split"] = split_name;
    r.config["effective"] = config_json(kv);
    const std::string line = r.to_line();
    std::cout << line << std::endl;
    if (!path.empty()) {
        std::ofstream out(path, std::ios::trunc);
        if (!out) throw DataError("cannot write report " + path);
        out << line << '\n';
    }
}

void write_norm_stats(KeyValueConfig& kv, const NormStats& st) {
    kv.set("anomaly.n_variates", st.mean.size());
    for (std::size_t c = 0; c < st.mean.size(); ++c) {
        kv.set("anomaly.mean." + std::to_string(c), st.mean[c]);
        kv.set("anomaly.std." + std::to_string(c), st.stddev[c]);
    }
}

NormStats read_norm_stats(const KeyValueConfig& kv) {
    NormStats st;
    const std::size_t n = kv.get_size("anomaly.n_variates", 0);
    if (n == 0) throw ConfigError("checkpoint carries no anomaly normalization statistics");
    for (std::size_t c = 0; c < n; ++c) {
        st.mean.push_back(kv.get_double("anomaly.mean." + std::to_string(c), 0.0));
        st.stddev.push_back(kv.get_double("anomaly.std." + std::to_string(c), 1.0));
    }
    return st;
}

MetricReport evaluate_task(TaskKind task, const TaskSplits& data, bool on_test, const ParamStore& ps,
                           const EncoderConfig& enc, const FinetuneConfig& fc, const KeyValueConfig& kv) {
    const auto& samples = on_test ? data.test : data.val;
    if (task == TaskKind::Anomaly) {
        if (!data.is_stream()) throw DataError("anomaly evaluation needs stream data (use --synthetic anomaly)");
        const auto& target = on_test ? *data.stream_test : *data.stream_val;
        return evaluate_anomaly(*data.stream_val, target, read_norm_stats(kv), ps, enc, fc.window_len,
                                parse_grid(kv.get_string("eval.quantile_grid", "")));
    }
    if (data.is_stream()) throw DataError(task_name(task) + " needs sample data, not streams");
    if (samples.empty()) throw DataError(std::string(on_test ? "test" : "validation") + " split is empty");
    switch (task) {
        case TaskKind::Classify: return evaluate_classify(samples, ps, enc);
        case TaskKind::Impute: return evaluate_impute(samples, ps, enc, fc.mask_ratio, run_seed(kv));
        case TaskKind::Forecast: return evaluate_forecast(samples, ps, enc, fc.horizon, kv.get_size("eval.seasonality", 24));
        case TaskKind::Anomaly: break;
    }
    throw ConfigError("unhandled task");
}

// ---------------------------------------------------------------------------

int cmd_pretrain(const Options& o) {
    KeyValueConfig kv = effective_config(o, "pretrain.");
    const EncoderConfig enc = EncoderConfig::read(kv);
    PretrainConfig pc = PretrainConfig::read(kv);
    pc.save_every = kv.get_size("pretrain.save_every", 0);
    pc.log_wallclock = kv.get_bool("pretrain.log_wallclock", false);
    pc.checkpoint_path = o.out.empty() ? "pretrain.ckpt" : o.out;
    pc.metrics_path = pc.checkpoint_path + ".metrics.jsonl";
    const TaskSplits data = load_data(kv, "default");
    if (data.is_stream()) throw DataError("pre-training needs sample data, not anomaly streams");
    log().info("pre-training on {} samples from {} datasets for {} steps", data.train.size(), data.registry.size(), pc.steps);
    const auto res = run_pretraining(data.train_corpus(), enc, pc, run_seed(kv));
    nlohmann::json summary{{"command", "pretrain"}, {"steps", pc.steps}, {"checkpoint", pc.checkpoint_path},
                           {"metrics", pc.metrics_path}};
    if (!res.log.empty()) {
        summary["loss_mpm_initial"] = res.log.front().loss_mpm;
        summary["loss_mpm_final"] = res.log.back().loss_mpm;
        summary["loss_ftp_final"] = res.log.back().loss_ftp;
    }
    std::cout << summary.dump() << std::endl;
    return 0;
}

int cmd_finetune(const Options& o) {
    KeyValueConfig kv = effective_config(o, "finetune.");
    if (!kv.has("finetune.task")) throw ConfigError("finetune needs --task");
    FinetuneConfig fc = FinetuneConfig::read(kv);
    const std::uint64_t seed = run_seed(kv);
    const std::size_t preset_p = task_patch_len(fc.task);

    EncoderConfig enc;
    ParamStore init;
    const bool random_init = o.from.empty() || o.from == "random";
    if (random_init) {
        enc = EncoderConfig::read(kv);
        enc.patch_len = kv.get_size("patch_len", preset_p);
        enc.validate();
        init = init_params(enc, derive_seed({seed, 0x1417}));
    } else {
        const auto ck = load_checkpoint(o.from);
        enc = EncoderConfig::read(ck.config);
        init = ck.params;
        const std::size_t ck_p = enc.patch_len;
        if (!kv.has("patch_len") && ck_p != preset_p)
            throw ConfigError("checkpoint patch length " + std::to_string(ck_p) + " does not match the " +
                              task_name(fc.task) + " preset " + std::to_string(preset_p) + "; pass --patch-len " +
                              std::to_string(ck_p) + " to keep the checkpoint patches or --patch-len " +
                              std::to_string(preset_p) + " to re-initialize the patch projections");
        const std::size_t p = kv.get_size("patch_len", ck_p);
        if (p != ck_p) {
            log().warn("patch length {} differs from the checkpoint's {}: re-initializing W_in and W_out", p, ck_p);
            adapt_patch_len(init, enc, p, derive_seed({seed, 0x9A7C}));
        }
    }

    const TaskSplits data = load_data(kv, task_name(fc.task));
    TaskData td;
    if (fc.task == TaskKind::Anomaly) {
        if (!data.is_stream()) throw DataError("anomaly fine-tuning needs stream data (use --synthetic anomaly)");
        td = anomaly_task_data(data.stream_train->stream, fc.window_len);
    } else {
        if (data.is_stream()) throw DataError(task_name(fc.task) + " needs sample data, not streams");
        td.samples = data.train;
    }
    if (td.samples.empty()) throw DataError("training split is empty");
    if (fc.task == TaskKind::Classify) {
        int top = -1;
        for (const auto& s : td.samples) {
            if (!s.class_label) throw DataError("sample " + s.sample_id + " has no class label");
            top = std::max(top, *s.class_label);
        }
        fc.n_classes = std::max<std::size_t>(2, static_cast<std::size_t>(top + 1));
    }

    log().info("fine-tuning {} on {} items for {} steps (P={}, {})", task_name(fc.task), td.samples.size(), fc.steps,
               enc.patch_len, random_init ? "random init" : o.from);
    auto res = finetune(init, enc, fc, td, seed);

    KeyValueConfig ck_cfg = kv;
    enc.write(ck_cfg);
    fc.write(ck_cfg);
    write_registry(ck_cfg, data.registry);
    ck_cfg.set("finetune.from", random_init ? std::string("random") : o.from);
    if (fc.task == TaskKind::Anomaly) write_norm_stats(ck_cfg, td.stats);
    const std::string out = o.out.empty() ? task_name(fc.task) + ".ckpt" : o.out;
    save_checkpoint(out, ck_cfg, res.params);
    quantize_to_f32(res.params);  // report on exactly what was saved

    MetricReport r = evaluate_task(fc.task, data, false, res.params, enc, fc, ck_cfg);
    r.add("loss_final", res.losses.empty() ? 0.0 : res.losses.back());
    emit(r, ck_cfg, "val", out + ".report.jsonl");
    return 0;
}

int cmd_eval(const Options& o) {
    if (o.from.empty()) throw ConfigError("eval needs --from <task checkpoint>");
    const auto ck = load_checkpoint(o.from);
    KeyValueConfig kv = ck.config;
    kv.merge(effective_config(o, "finetune."));
    if (!o.seed_opt->count()) kv.set("seed", ck.config.get_string("seed", "0"));
    if (!ck.config.has("finetune.task")) throw ConfigError(o.from + " is not a task checkpoint (no finetune.task)");
    if (!o.task.empty() && o.task != ck.config.get_string("finetune.task", ""))
        throw ConfigError("--task " + o.task + " does not match the checkpoint task " + ck.config.get_string("finetune.task", ""));
    if (o.patch_len && *o.patch_len != ck.config.get_size("patch_len", 0))
        throw ConfigError("eval cannot change the patch length of a task checkpoint");
    const EncoderConfig enc = EncoderConfig::read(ck.config);
    const FinetuneConfig fc = FinetuneConfig::read(kv);
    if (fc.task == TaskKind::Classify && !ck.params.contains(param_names::cls_w))
        throw ConfigError(o.from + " has no classifier head");
    const TaskSplits data = load_data(kv, task_name(fc.task));
    emit(evaluate_task(fc.task, data, true, ck.params, enc, fc, kv), kv, "test", o.out);
    return 0;
}

int cmd_export(const Options& o) {
    if (o.from.empty()) throw ConfigError("export needs --from <checkpoint>");
    const RepKind which = parse_rep_kind(o.which);
    const auto ck = load_checkpoint(o.from);
    KeyValueConfig kv = ck.config;
    kv.merge(effective_config(o, "finetune."));
    const EncoderConfig enc = EncoderConfig::read(ck.config);
    const TaskSplits data = load_data(kv, "classify");
    if (data.is_stream()) throw DataError("export needs sample data, not streams");
    const auto samples = data.all();
    if (samples.empty()) throw DataError("nothing to export");
    const std::string out = o.out.empty() ? "representations.tsbe" : o.out;
    const auto reps = export_representations(samples, ck.params, enc, which);
    write_representations(out, reps);
    std::cout << nlohmann::json{{"command", "export"}, {"which", o.which}, {"rows", reps.rows}, {"cols", reps.cols},
                                {"matrix", out}, {"sidecar", out + ".tsv"}}
                     .dump()
              << std::endl;
    return 0;
}

int cmd_gen_data(const Options& o) {
    const KeyValueConfig kv = effective_config(o, "pretrain.");
    const std::string preset = kv.get_string("data.synthetic", "default");
    const std::uint64_t seed = kv.get_size("data.seed", run_seed(kv));
    const std::string out = o.out.empty() ? "data" : o.out;
    const TaskSplits t = synthetic_preset(preset, seed);
    write_task_data(out, t, seed);
    std::cout << nlohmann::json{{"command", "gen-data"}, {"preset", preset}, {"seed", seed}, {"dir", out},
                                {"train", t.is_stream() ? t.stream_train->stream.length : t.train.size()},
                                {"val", t.is_stream() ? t.stream_val->stream.length : t.val.size()},
                                {"test", t.is_stream() ? t.stream_test->stream.length : t.test.size()}}
                     .dump()
              << std::endl;
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    if (const char* lvl = std::getenv("TIMESBERT_LOG")) {
        const std::string s = lvl;
        if (s != "error" && s != "info" && s != "debug") {
            std::cerr << "TIMESBERT_LOG must be error, info or debug (got '" << s << "')\n";
            return kExitConfig;
        }
    }

    CLI::App app{"TimesBERT desk-scale toolkit"};
    app.require_subcommand(1);
    Options o;
    struct Sub {
        const char* name;
        const char* help;
        int (*run)(const Options&);
    };
    const Sub subs[] = {
        {"pretrain", "pre-train the encoder with MPM + functional token prediction", cmd_pretrain},
        {"finetune", "fine-tune a checkpoint on a downstream task", cmd_finetune},
        {"eval", "evaluate a task checkpoint on the test split", cmd_eval},
        {"export", "export DOM / VAR / pooled representations", cmd_export},
        {"gen-data", "write a synthetic task to a data directory", cmd_gen_data},
    };
    std::vector<CLI::App*> cmds;
    for (const auto& s : subs) {
        auto* c = app.add_subcommand(s.name, s.help);
        add_common(*c, o);
        cmds.push_back(c);
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitConfig;
    }

    try {
        for (std::size_t i = 0; i < cmds.size(); ++i) {
            if (!cmds[i]->parsed()) continue;
            o.seed_opt = cmds[i]->get_option("--seed");
            o.freeze_opt = cmds[i]->get_option("--freeze-backbone");
            return subs[i].run(o);
        }
    } catch (const ConfigError& e) {
        log().error("config error: {}", e.what());
        return kExitConfig;
    } catch (const DimensionError& e) {
        log().error("data error: {}", e.what());
        return kExitData;
    } catch (const DataError& e) {
        log().error("data error: {}", e.what());
        return kExitData;
    } catch (const NumericError& e) {
        log().error("numeric error: {}", e.what());
        return kExitNumeric;
    }
    return kExitConfig;
}
