#pragma once

#include "nimbus/trainer.hpp"
#include "nimbus/weathergen.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace nimbus::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

// ---------------------------------------------------------------------------
// Configuration assembly

/// Maps a module name to the config switch that stubs it out.
inline void apply_disable(TrainConfig& cfg, const std::string& module) {
    if (module == "ggs") {
        cfg.ggs = false;
    } else if (module == "csm") {
        cfg.csm = false;
    } else if (module == "plm") {
        cfg.plm = false;
    } else {
        throw InvalidInput("--disable expects ggs, csm or plm, got '" + module + "'");
    }
}

inline TrainConfig read_config_file(const fs::path& path) {
    std::ifstream is(path);
    if (!is) {
        throw DataError("cannot open config " + path.string());
    }
    return parse_config(is);
}

/// File, then overrides, then disables.
inline TrainConfig assemble_config(const std::string& config_path, const std::vector<std::string>& overrides,
                                   const std::vector<std::string>& disables) {
    TrainConfig cfg = config_path.empty() ? TrainConfig{} : read_config_file(config_path);
    for (const auto& kv : overrides) {
        apply_override(cfg, kv);
    }
    for (const auto& d : disables) {
        apply_disable(cfg, d);
    }
    cfg.validate();
    return cfg;
}

inline TrainingData training_data(const Dataset& d) { return TrainingData{d.cameras, d.inputs, d.points}; }

inline void write_text_atomic(const fs::path& path, const std::string& text) {
    const fs::path tmp = path.string() + ".partial";
    {
        std::ofstream os(tmp, std::ios::binary);
        os << text;
        if (!os) {
            throw DataError("cannot write " + tmp.string());
        }
    }
    fs::rename(tmp, path);
}

inline void write_png_atomic(const fs::path& path, const ImageBuffer& img) {
    const fs::path tmp = path.string() + ".partial";
    write_png(tmp, img);
    fs::rename(tmp, path);
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalRow {
    std::size_t view = 0;
    double psnr = 0.0, ssim = 0.0;              // clean render vs reference
    double input_psnr = 0.0, input_ssim = 0.0;  // degraded input vs reference
};

inline void check_resolution(const std::vector<Camera>& model_cams, const Dataset& data) {
    if (model_cams.size() != data.size()) {
        throw DataError("checkpoint has " + std::to_string(model_cams.size()) + " cameras, dataset has " +
                        std::to_string(data.size()));
    }
    for (std::size_t k = 0; k < data.size(); ++k) {
        if (model_cams[k].width != data.cameras[k].width || model_cams[k].height != data.cameras[k].height) {
            throw DataError("resolution mismatch at view " + std::to_string(k) + ": checkpoint " +
                            std::to_string(model_cams[k].width) + "x" + std::to_string(model_cams[k].height) +
                            ", dataset " + std::to_string(data.cameras[k].width) + "x" +
                            std::to_string(data.cameras[k].height));
        }
    }
}

inline std::vector<EvalRow> evaluate(const Model& model, const std::vector<Camera>& cams, const Dataset& data) {
    check_resolution(cams, data);
    std::vector<EvalRow> rows;
    for (std::size_t k = 0; k < data.size(); ++k) {
        const ImageBuffer clean = render_clean(model, cams[k]);
        EvalRow r;
        r.view = k;
        r.psnr = psnr(clean, data.clean[k]);
        r.ssim = ssim(clean, data.clean[k], false).value;
        r.input_psnr = psnr(data.inputs[k], data.clean[k]);
        r.input_ssim = ssim(data.inputs[k], data.clean[k], false).value;
        rows.push_back(r);
    }
    return rows;
}

inline EvalRow mean_row(const std::vector<EvalRow>& rows) {
    EvalRow m;
    for (const auto& r : rows) {
        m.psnr += r.psnr;
        m.ssim += r.ssim;
        m.input_psnr += r.input_psnr;
        m.input_ssim += r.input_ssim;
    }
    const double n = rows.empty() ? 1.0 : static_cast<double>(rows.size());
    m.psnr /= n;
    m.ssim /= n;
    m.input_psnr /= n;
    m.input_ssim /= n;
    return m;
}

inline std::string eval_csv(const std::vector<EvalRow>& rows) {
    std::ostringstream os;
    os << "view,psnr,ssim,input_psnr,input_ssim\n";
    for (const auto& r : rows) {
        os << r.view << ',' << detail::format_double(r.psnr) << ',' << detail::format_double(r.ssim) << ','
           << detail::format_double(r.input_psnr) << ',' << detail::format_double(r.input_ssim) << '\n';
    }
    return os.str();
}

/// input | clean render | reference | T | P | R, side by side.
inline ImageBuffer decomposition_panel(const ImageBuffer& input, const ViewForward& f, const ImageBuffer& reference) {
    const int h = input.height(), w = input.width();
    const std::array<const ImageBuffer*, 6> tiles = {&input,         &f.clean,    &reference,
                                                     &f.transmittance, &f.airlight, &f.residual};
    ImageBuffer panel(h, 6 * w, 3);
    for (std::size_t t = 0; t < tiles.size(); ++t) {
        const ImageBuffer& img = *tiles[t];
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                for (int c = 0; c < 3; ++c) {
                    panel.at(y, static_cast<int>(t) * w + x, c) = img.at(y, x, img.channels() == 1 ? 0 : c);
                }
            }
        }
    }
    return panel;
}

/// The forward pass of a stored model on view `k`, with its layer when one exists.
inline ViewForward checkpoint_forward(const Checkpoint& ck, const TrainConfig& cfg, const Dataset& data, std::size_t k) {
    const ParticulateLayer* layer = nullptr;
    for (const auto& l : ck.state.layers) {
        if (l.view == k) {
            layer = &l;
        }
    }
    return forward_view(ck.state.model, ck.cameras.at(k), data.inputs.at(k), layer, cfg.samples);
}

inline fs::path panel_dir(const fs::path& report) {
    return report.parent_path() / (report.stem().string() + "_panels");
}

// ---------------------------------------------------------------------------
// Training driver

struct TrainOutputs {
    fs::path dir;
    bool ggs_log = false;
    std::string data_root;
};

struct TrainSummary {
    std::vector<IterationRecord> history;
    std::vector<DensifyEvent> densify;
    Checkpoint checkpoint;
};

/// Trains with logs under `out.dir` and writes checkpoint.nimc at the end.
inline TrainSummary train_to_directory(const Dataset& data, const TrainConfig& cfg, const TrainOutputs& out,
                                       const Checkpoint* resume = nullptr) {
    fs::create_directories(out.dir);
    const auto mode = resume ? std::ios::app : std::ios::trunc;
    std::ofstream log(out.dir / "train_log.csv", mode), dens(out.dir / "densify_log.csv", mode);
    std::ofstream ggs;
    if (out.ggs_log) {
        ggs.open(out.dir / "ggs_diag.csv", mode);
    }
    if (!log || !dens || (out.ggs_log && !ggs)) {
        throw DataError("cannot open logs under " + out.dir.string());
    }
    if (!resume) {
        write_log_header(log);
        write_densify_header(dens);
        if (out.ggs_log) {
            write_ggs_csv_header(ggs);
        }
    }
    write_text_atomic(out.dir / "config.txt", config_to_text(cfg));

    TrainingData td = training_data(data);
    std::unique_ptr<Trainer> trainer;
    if (resume) {
        check_resolution(resume->cameras, data);
        trainer = std::make_unique<Trainer>(std::move(td), cfg, resume->state);
    } else {
        trainer = std::make_unique<Trainer>(std::move(td), cfg);
    }
    TrainSinks sinks;
    sinks.log = &log;
    sinks.densify = &dens;
    sinks.ggs = out.ggs_log ? &ggs : nullptr;
    sinks.diagnostics = out.dir / "diagnostics";
    sinks.checkpoint = [&](const TrainState& st) {
        save_checkpoint(out.dir / ("checkpoint_" + std::to_string(st.iteration) + ".nimc"),
                        Checkpoint{st, config_to_text(cfg), data.cameras, out.data_root});
    };
    trainer->set_sinks(sinks);
    trainer->run();
    log.flush();
    dens.flush();
    if (!log || !dens) {
        throw DataError("failed writing logs under " + out.dir.string());
    }
    TrainSummary s;
    s.checkpoint = make_checkpoint(*trainer, out.data_root);
    save_checkpoint(out.dir / "checkpoint.nimc", s.checkpoint);
    s.history = trainer->history();
    s.densify = trainer->densify_events();
    return s;
}

// ---------------------------------------------------------------------------
// Ablation sweeps

struct Variant {
    std::string name;
    std::function<void(TrainConfig&)> apply;
};

/// Densify events whose parent lies beyond `far_radius` from the vertical axis.
inline std::size_t far_densify_count(const std::vector<DensifyEvent>& events, double far_radius) {
    return static_cast<std::size_t>(std::count_if(events.begin(), events.end(), [&](const DensifyEvent& e) {
        return std::hypot(e.position.x(), e.position.y()) > far_radius;
    }));
}

inline std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (const char ch : s + ",") {
        if (ch == ',') {
            if (!detail::trim(cur).empty()) {
                out.push_back(detail::trim(cur));
            }
            cur.clear();
        } else {
            cur += ch;
        }
    }
    return out;
}

inline std::vector<Variant> sweep_variants(const std::string& sweep, const std::string& values, long total) {
    std::vector<Variant> v;
    auto flag = [](bool TrainConfig::*member) { return [member](TrainConfig& c) { c.*member = false; }; };
    if (sweep == "schedule") {
        for (const auto& s : split_list(values.empty() ? "25,50,100,400" : values)) {
            const int m = detail::parse_number<int>("--values", s);
            if (m < 1 || m >= total) {
                throw InvalidInput("schedule value " + s + " must lie in [1, " + std::to_string(total - 1) + "]");
            }
            v.push_back({"m_init=" + s, [m, total](TrainConfig& c) {
                             c.m_init = m;
                             c.m_joint = static_cast<int>(total - m);
                         }});
        }
    } else if (sweep == "ggs") {
        v = {{"full", [](TrainConfig&) {}}, {"no_ggs", flag(&TrainConfig::ggs)}};
    } else if (sweep == "plm") {
        v = {{"full", [](TrainConfig&) {}}, {"no_plm", flag(&TrainConfig::plm)}};
    } else if (sweep == "csm") {
        v = {{"full", [](TrainConfig&) {}}, {"no_csm", flag(&TrainConfig::csm)}};
    } else if (sweep == "factors") {
        v.push_back({"full", [](TrainConfig&) {}});
        for (const GgsFactor f : {GgsFactor::Depth, GgsFactor::Radius, GgsFactor::Error}) {
            v.push_back({"drop_" + to_string(f), [f](TrainConfig& c) { c.ggs_drop = f; }});
        }
    } else if (sweep == "loss") {
        v = {{"full", [](TrainConfig&) {}},
             {"no_dcp", [](TrainConfig& c) { c.loss.lambda_dcp = 0.0; }},
             {"no_tv", [](TrainConfig& c) { c.loss.lambda_tv = 0.0; }},
             {"dcp_stage2", [](TrainConfig& c) { c.dcp_stage2 = true; }}};
    } else {
        throw InvalidInput("unknown sweep '" + sweep + "' (expected schedule, ggs, plm, csm, factors or loss)");
    }
    if (sweep != "schedule" && !values.empty()) {
        throw InvalidInput("--values applies only to the schedule sweep");
    }
    return v;
}

struct AblationRow {
    std::string variant;
    std::uint64_t seed = 0;
    double psnr = 0.0, ssim = 0.0;
    std::size_t gaussians = 0, densified = 0, far_densified = 0;
    double final_loss = 0.0;
};

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
    std::ostringstream os;
    os << "variant,seed,psnr,ssim,gaussians,densified,far_densified,final_loss\n";
    for (const auto& r : rows) {
        os << r.variant << ',' << r.seed << ',' << detail::format_double(r.psnr) << ',' << detail::format_double(r.ssim)
           << ',' << r.gaussians << ',' << r.densified << ',' << r.far_densified << ','
           << detail::format_double(r.final_loss) << '\n';
    }
    return os.str();
}

inline std::string ablation_markdown(const std::string& sweep, const std::vector<AblationRow>& rows,
                                     const Dataset& data) {
    std::vector<std::string> order;
    for (const auto& r : rows) {
        if (std::find(order.begin(), order.end(), r.variant) == order.end()) {
            order.push_back(r.variant);
        }
    }
    std::ostringstream os;
    os << "# Ablation: " << sweep << "\n\n";
    os << "Dataset: `" << data.root.string() << "` (" << data.weather.kinds() << ", " << data.size()
       << " views). Means over seeds.\n\n";
    os << "| variant | runs | PSNR | SSIM | Gaussians | densified | far densified |\n";
    os << "|---|---|---|---|---|---|---|\n";
    os << std::fixed;
    for (const auto& name : order) {
        double p = 0, s = 0, g = 0, d = 0, f = 0;
        int n = 0;
        for (const auto& r : rows) {
            if (r.variant == name) {
                p += r.psnr;
                s += r.ssim;
                g += static_cast<double>(r.gaussians);
                d += static_cast<double>(r.densified);
                f += static_cast<double>(r.far_densified);
                ++n;
            }
        }
        os << "| " << name << " | " << n << " | " << std::setprecision(2) << p / n << " | " << std::setprecision(4)
           << s / n << " | " << std::setprecision(1) << g / n << " | " << d / n << " | " << f / n << " |\n";
    }
    return os.str();
}

/// Trains every variant for every seed; logs of each run land in out/runs/<variant>_seed<k>.
inline std::vector<AblationRow> run_ablation(const Dataset& data, const TrainConfig& base, const std::string& sweep,
                                             const std::vector<std::uint64_t>& seeds, const std::string& values,
                                             const fs::path& out, std::ostream* progress = nullptr) {
    const auto variants = sweep_variants(sweep, values, base.total());
    std::vector<AblationRow> rows;
    for (const auto& v : variants) {
        for (const std::uint64_t seed : seeds) {
            TrainConfig cfg = base;
            v.apply(cfg);
            cfg.seed = seed;
            cfg.validate();
            std::string dir = v.name + "_seed" + std::to_string(seed);
            std::replace(dir.begin(), dir.end(), '=', '_');
            if (progress) {
                *progress << "ablate: " << v.name << " seed " << seed << std::endl;
            }
            const TrainSummary s = train_to_directory(data, cfg, TrainOutputs{out / "runs" / dir, false, data.root.string()});
            const EvalRow m = mean_row(evaluate(s.checkpoint.state.model, s.checkpoint.cameras, data));
            AblationRow r;
            r.variant = v.name;
            r.seed = seed;
            r.psnr = m.psnr;
            r.ssim = m.ssim;
            r.gaussians = s.checkpoint.state.model.scene.size();
            r.densified = s.densify.size();
            r.far_densified = far_densify_count(s.densify, data.scene.far_radius());
            r.final_loss = s.history.empty() ? 0.0 : s.history.back().loss.total;
            rows.push_back(r);
        }
    }
    write_text_atomic(out / "ablation.csv", ablation_csv(rows));
    write_text_atomic(out / "ablation.md", ablation_markdown(sweep, rows, data));
    return rows;
}

// ---------------------------------------------------------------------------
// Entry point

inline void mark_incomplete(const fs::path& dir, const std::string& why) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    std::ofstream(dir / "INCOMPLETE") << why << '\n';
}

inline void clear_incomplete(const fs::path& dir) {
    std::error_code ec;
    fs::remove(dir / "INCOMPLETE", ec);
}

/// Runs `body`; on failure leaves an INCOMPLETE marker in `dir` and rethrows.
template <class Fn>
void guarded(const fs::path& dir, Fn&& body) {
    try {
        body();
    } catch (const std::exception& e) {
        mark_incomplete(dir, e.what());
        throw;
    }
    clear_incomplete(dir);
}

inline int run(int argc, char** argv) {
    CLI::App app{"Weather-robust Gaussian splatting toolkit", "nimbus"};
    app.require_subcommand(1);

    std::string preset, out, data, config, checkpoint, camera, report, sweep, values, seeds_text = "1";
    std::uint64_t scene_seed = 7, weather_seed = 11;
    bool overwrite = false, ggs_log = false;
    std::vector<std::string> disables, overrides;
    std::string resume;
    long view = -1;

    auto* synth = app.add_subcommand("synth", "Generate a synthetic degraded dataset");
    synth->add_option("--preset", preset, "H, R, S, H+R, H+S, R+S, H+R+S or none")->required();
    synth->add_option("--scene-seed", scene_seed, "Scene seed");
    synth->add_option("--weather-seed", weather_seed, "Weather seed");
    synth->add_option("--out", out, "Dataset directory")->required();
    synth->add_flag("--overwrite", overwrite, "Replace an existing directory");

    auto* train = app.add_subcommand("train", "Train on a dataset");
    train->add_option("--data", data, "Dataset directory")->required();
    train->add_option("--config", config, "key = value config file");
    train->add_option("--out", out, "Output directory")->required();
    train->add_option("--disable", disables, "Stub a module: ggs, csm or plm")->take_all();
    train->add_option("--override", overrides, "key=value applied after the config file")->take_all();
    train->add_option("--resume", resume, "Continue from a checkpoint");
    train->add_flag("--ggs-log", ggs_log, "Write per-Gaussian scaling diagnostics");

    auto* render = app.add_subcommand("render", "Render the clean scene from a camera");
    render->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
    render->add_option("--camera", camera, "Camera line: px py pz qw qx qy qz focal cx cy W H")->required();
    render->add_option("--out", out, "Output .png or .nimf")->required();

    auto* eval = app.add_subcommand("eval", "Score clean renders against references");
    eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
    eval->add_option("--data", data, "Dataset directory")->required();
    eval->add_option("--report", report, "CSV report path; panels go to <stem>_panels/")->required();

    auto* dump = app.add_subcommand("dump", "Write every intermediate map of one view");
    dump->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
    dump->add_option("--view", view, "View index")->required();
    dump->add_option("--out", out, "Output directory")->required();
    dump->add_option("--data", data, "Dataset directory (default: the one recorded in the checkpoint)");

    auto* ablate = app.add_subcommand("ablate", "Train and score a family of variants");
    ablate->add_option("--data", data, "Dataset directory")->required();
    ablate->add_option("--config", config, "Base config file");
    ablate->add_option("--override", overrides, "key=value applied to every run")->take_all();
    ablate->add_option("--out", out, "Output directory")->required();
    ablate->add_option("--sweep", sweep, "schedule, ggs, plm, csm, factors or loss")->required();
    ablate->add_option("--seeds", seeds_text, "Comma-separated training seeds");
    ablate->add_option("--values", values, "Comma-separated M_init values for the schedule sweep");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    }

    try {
        if (*synth) {
            const WeatherSpec w = weather_preset(preset, weather_seed);
            SceneSpec spec;
            spec.seed = scene_seed;
            spec.validate();
            const bool existed = fs::exists(out);
            try {
                compose_dataset(out, build_scene(spec), spec, w, overwrite);
            } catch (const DataError&) {
                if (!existed) {
                    std::error_code ec;
                    fs::remove_all(out, ec);
                }
                throw;
            }
            std::cout << "wrote " << spec.cameras << " views (" << w.kinds() << ") to " << out << '\n';
        } else if (*train) {
            const TrainConfig cfg = assemble_config(config, overrides, disables);
            guarded(out, [&] {
                const Dataset d = load_dataset(data);
                std::optional<Checkpoint> ck;
                if (!resume.empty()) {
                    ck = load_checkpoint(resume);
                    if (ck->config_hash() != config_hash(cfg)) {
                        throw InvalidInput("config differs from the one stored in " + resume);
                    }
                }
                const TrainSummary s = train_to_directory(d, cfg, TrainOutputs{out, ggs_log, fs::absolute(data).string()},
                                                          ck ? &*ck : nullptr);
                std::cout << "trained " << s.checkpoint.state.iteration << " iterations, "
                          << s.checkpoint.state.model.scene.size() << " Gaussians; checkpoint in " << out << '\n';
            });
        } else if (*render) {
            const Checkpoint ck = load_checkpoint(checkpoint);
            const ImageBuffer img = render_clean(ck.state.model, parse_camera(camera));
            const fs::path p(out);
            if (p.extension() == ".nimf") {
                const fs::path tmp = out + ".partial";
                write_nimf(tmp, img);
                fs::rename(tmp, p);
            } else if (p.extension() == ".png") {
                write_png_atomic(p, img);
            } else {
                throw InvalidInput("--out must end in .png or .nimf");
            }
        } else if (*eval) {
            const Checkpoint ck = load_checkpoint(checkpoint);
            const TrainConfig cfg = parse_config(ck.config_text);
            const Dataset d = load_dataset(data);
            const auto rows = evaluate(ck.state.model, ck.cameras, d);
            const fs::path rp(report);
            if (rp.has_parent_path()) {
                fs::create_directories(rp.parent_path());
            }
            const fs::path pdir = panel_dir(rp);
            fs::create_directories(pdir);
            for (std::size_t k = 0; k < d.size(); ++k) {
                const ViewForward f = checkpoint_forward(ck, cfg, d, k);
                write_png_atomic(pdir / ("view_" + std::to_string(k) + ".png"), decomposition_panel(d.inputs[k], f, d.clean[k]));
            }
            write_text_atomic(rp, eval_csv(rows));
            const EvalRow m = mean_row(rows);
            std::cout << std::fixed << std::setprecision(3) << "mean PSNR " << m.psnr << " dB (input " << m.input_psnr
                      << "), SSIM " << m.ssim << " (input " << m.input_ssim << ")\n";
        } else if (*dump) {
            const Checkpoint ck = load_checkpoint(checkpoint);
            if (view < 0 || static_cast<std::size_t>(view) >= ck.cameras.size()) {
                throw InvalidInput("view " + std::to_string(view) + " out of range [0, " +
                                   std::to_string(ck.cameras.size()) + ")");
            }
            const std::string root = data.empty() ? ck.data_root : data;
            if (root.empty()) {
                throw InvalidInput("checkpoint records no dataset; pass --data");
            }
            const TrainConfig cfg = parse_config(ck.config_text);
            guarded(out, [&] {
                const Dataset d = load_dataset(root);
                check_resolution(ck.cameras, d);
                dump_view(out, checkpoint_forward(ck, cfg, d, static_cast<std::size_t>(view)));
                write_nimf(fs::path(out) / "input.nimf", d.inputs[static_cast<std::size_t>(view)]);
            });
        } else if (*ablate) {
            const TrainConfig cfg = assemble_config(config, overrides, {});
            std::vector<std::uint64_t> seeds;
            for (const auto& s : split_list(seeds_text)) {
                seeds.push_back(detail::parse_number<std::uint64_t>("--seeds", s));
            }
            if (seeds.empty()) {
                throw InvalidInput("--seeds is empty");
            }
            guarded(out, [&] {
                const Dataset d = load_dataset(data);
                fs::create_directories(out);
                run_ablation(d, cfg, sweep, seeds, values, out, &std::cout);
                std::cout << "wrote " << (fs::path(out) / "ablation.md").string() << '\n';
            });
        }
    } catch (const InvalidInput& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kUsage;
    } catch (const NumericalAbort& e) {
        std::cerr << "numerical abort: " << e.what() << '\n';
        return kNumerical;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kData;
    }
    return kOk;
}

}  // namespace nimbus::cli
