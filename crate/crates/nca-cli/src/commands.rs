//! Command implementations.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nca_embed::bank::MemoryBank;
use nca_embed::benchmark::{synth_image_benchmark, ImageBenchmarkSpec};
use nca_embed::checkpoint::Checkpoint;
use nca_embed::data::{
    load_delimited, load_idx_images, stratified_split, synth_hierarchical, write_delimited,
    DelimitedSchema, Delimiter, LabelHierarchy, LabeledDataset, SyntheticSpec,
};
use nca_embed::embedding::EmbeddingStore;
use nca_embed::encoder::{Activation, EncoderNetwork, SoftmaxHead};
use nca_embed::eval::{
    closed_set_accuracy, embed_dataset, fewshot_eval, induction_accuracy, EvalReport, Gallery,
    KnnConfig,
};
use nca_embed::gradcheck::{run_standard_checks, GradCheckSettings};
use nca_embed::loss::{probs_from_sims_leave_one_out, support_size_of_probs};
use nca_embed::trainer::{
    train_nca, train_nca_exact, train_softmax_baseline, LrSchedule, MomentumSchedule, TrainConfig,
    TrainMode,
};

use crate::args::*;
use crate::CliError;

fn load_dataset(args: &DataArgs, role: &str) -> Result<LabeledDataset, CliError> {
    match (&args.images, &args.labels, &args.file) {
        (Some(images), Some(labels), None) => Ok(load_idx_images(images, labels)?),
        (None, None, Some(file)) => {
            let schema = DelimitedSchema {
                delimiter: match args.delimiter.unwrap_or(DelimiterArg::Whitespace) {
                    DelimiterArg::Comma => Delimiter::Comma,
                    DelimiterArg::Whitespace => Delimiter::Whitespace,
                },
                has_header: args.header,
            };
            Ok(load_delimited(file, &schema)?)
        }
        (None, Some(_), _) | (Some(_), None, _) => Err(CliError::Config(format!(
            "{role}: --*-images and --*-labels must be given together"
        ))),
        (Some(_), Some(_), Some(_)) => Err(CliError::Config(format!(
            "{role}: give either an IDX pair or a delimited file, not both"
        ))),
        (None, None, None) => {
            Err(CliError::Config(format!("{role}: no dataset given (IDX pair or --*-file)")))
        }
    }
}

fn write_file(path: &Path, content: &str) -> Result<(), CliError> {
    std::fs::write(path, content).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn echo_value(echo: &str, key: &str) -> Option<String> {
    echo.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")).map(str::to_string))
}

pub fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let mut r = Resolver::new(FileConfig::load(args.config.as_deref())?);
    let mode = match args.mode {
        Some(m) => m,
        None => match r.value("mode", None::<String>, "nca".into())?.as_str() {
            "nca" => ModeArg::Nca,
            "nca-exact" => ModeArg::NcaExact,
            "softmax-baseline" => ModeArg::SoftmaxBaseline,
            other => return Err(CliError::Config(format!("unknown mode {other:?}"))),
        },
    };
    r.record(
        "mode",
        match mode {
            ModeArg::Nca => "nca",
            ModeArg::NcaExact => "nca-exact",
            ModeArg::SoftmaxBaseline => "softmax-baseline",
        },
    );
    let sigma = r.value("sigma", args.sigma, 0.05)?;
    let epsilon = r.value("epsilon", args.epsilon, 1e-12)?;
    let dim = r.value("dim", args.dim, 128)?;
    let hidden = parse_widths(&r.value("hidden", args.hidden, "256,256".into())?)?;
    let epochs = r.value("epochs", args.epochs, 130)?;
    let batch_size = r.value("batch-size", args.batch_size, 256)?;
    let lr = r.value("lr", args.lr, 0.1)?;
    let lr_decay = r.value("lr-decay", args.lr_decay, 0.1)?;
    let lr_interval = r.value("lr-interval", args.lr_interval, 40)?;
    let sgd_momentum = r.value("sgd-momentum", args.sgd_momentum, 0.9)?;
    let weight_decay = r.value("weight-decay", args.weight_decay, 0.0)?;
    let m_start = r.value("memory-momentum-start", args.memory_momentum_start, 0.5)?;
    let m_end = r.value("memory-momentum-end", args.memory_momentum_end, 0.9)?;
    let seed = r.value("seed", args.seed, 0)?;
    let threads = r.value("threads", args.threads, 1)?;
    let bank_init = args.bank_init.unwrap_or(BankInitArg::Random);
    r.record("bank-init", if bank_init == BankInitArg::Random { "random" } else { "warmup" });
    let checkpoint_out =
        args.checkpoint_out.unwrap_or_else(|| PathBuf::from("checkpoint.snca"));
    let log_out = args.log_out.unwrap_or_else(|| PathBuf::from("train_log.csv"));
    r.record("checkpoint-out", checkpoint_out.display());
    r.record("log-out", log_out.display());
    let _ = threads;

    let dataset = load_dataset(&args.train_data.as_data_args(), "train")?;
    r.record("train-samples", dataset.len());
    r.record("input-dim", dataset.input_dim());

    let cfg = TrainConfig {
        temperature: sigma,
        epsilon,
        batch_size,
        epochs,
        lr: LrSchedule { initial: lr, decay: lr_decay, interval: lr_interval },
        bank_momentum: MomentumSchedule { start: m_start, end: m_end },
        sgd_momentum,
        weight_decay,
        seed,
        mode: match mode {
            ModeArg::Nca => TrainMode::Nca,
            ModeArg::NcaExact => TrainMode::NcaExact,
            ModeArg::SoftmaxBaseline => TrainMode::SoftmaxBaseline,
        },
    };

    let (checkpoint, report) = match mode {
        ModeArg::Nca => {
            let mut net = EncoderNetwork::mlp(dataset.input_dim(), &hidden, dim, seed);
            let mut bank = match bank_init {
                BankInitArg::Random => MemoryBank::init(dataset.len(), dim, seed)?,
                BankInitArg::Warmup => {
                    let gallery = embed_dataset(&net, &dataset)?;
                    let rows = gallery.rows_flat().to_vec();
                    MemoryBank::from_f32_rows(rows, dataset.len(), dim)?
                }
            };
            let report = train_nca(&dataset, &mut net, &mut bank, &cfg)?;
            (
                Checkpoint { encoder: net, bank: Some(bank), head: None, config_echo: r.echo() },
                report,
            )
        }
        ModeArg::NcaExact => {
            let mut net = EncoderNetwork::mlp(dataset.input_dim(), &hidden, dim, seed);
            let report = train_nca_exact(&dataset, &mut net, &cfg)?;
            (Checkpoint { encoder: net, bank: None, head: None, config_echo: r.echo() }, report)
        }
        ModeArg::SoftmaxBaseline => {
            let feature_dim = hidden.last().copied().unwrap_or(dim);
            let trunk_hidden = &hidden[..hidden.len().saturating_sub(1)];
            let mut net = EncoderNetwork::mlp_with(
                dataset.input_dim(),
                trunk_hidden,
                feature_dim,
                Activation::Relu,
                seed,
            );
            let mut head =
                SoftmaxHead::init(dataset.num_classes(), feature_dim, seed.wrapping_add(1))
                    .map_err(|e| CliError::Config(e.to_string()))?;
            let report = train_softmax_baseline(&dataset, &mut net, &mut head, &cfg)?;
            (
                Checkpoint { encoder: net, bank: None, head: Some(head), config_echo: r.echo() },
                report,
            )
        }
    };

    checkpoint.save(&checkpoint_out)?;
    let mut log = BufWriter::new(
        File::create(&log_out).map_err(|e| CliError::Io(format!("{}: {e}", log_out.display())))?,
    );
    report
        .write_log(&mut log)
        .and_then(|()| log.flush())
        .map_err(|e| CliError::Io(format!("{}: {e}", log_out.display())))?;

    println!("mode         {}", report.mode.as_str());
    if let Some(obj) = report.final_objective() {
        println!("objective    {obj:.6}");
    }
    if let Some(share) = report.nca_time_share() {
        println!("nca share    {:.1}% of step time", 100.0 * share);
    }
    println!("checkpoint   {}", checkpoint_out.display());
    println!("log          {}", log_out.display());
    Ok(())
}

/// Gallery of features appropriate to the checkpoint's mode: the embedding
/// output for NCA models, the penultimate (encoder) output for the baseline.
/// Rows are unit-normalized either way since similarity is cosine.
fn checkpoint_gallery(
    ckpt: &Checkpoint,
    dataset: &LabeledDataset,
) -> Result<Gallery, CliError> {
    if dataset.input_dim() != ckpt.encoder.input_dim() {
        return Err(CliError::Config(format!(
            "checkpoint expects input dim {}, dataset has {}",
            ckpt.encoder.input_dim(),
            dataset.input_dim()
        )));
    }
    Ok(embed_dataset(&ckpt.encoder, dataset)?)
}

pub fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let mut r = Resolver::new(FileConfig::load(args.config.as_deref())?);
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let k = r.value("k", args.k, 30)?;
    let default_temp = echo_value(&ckpt.config_echo, "sigma")
        .and_then(|s| s.parse::<f64>().ok())
        .unwrap_or(0.05);
    let temperature = r.value("temperature", args.temperature, default_temp)?;
    let support_sample = r.value("support-sample", args.support_sample, 0)?;
    let out_dir = args.out_dir.unwrap_or_else(|| PathBuf::from("."));

    let train = load_dataset(&args.train_data.as_data_args(), "train")?;
    let test = load_dataset(&args.test_data.as_data_args(), "test")?;
    let gallery = checkpoint_gallery(&ckpt, &train)?;
    let queries = checkpoint_gallery(&ckpt, &test)?;

    let cfg = KnnConfig::new(k, temperature)?;
    let report = closed_set_accuracy(&gallery, &queries, &cfg, false)?;
    print!("{}", report.format_table());
    write_file(&out_dir.join("eval_report.csv"), &report.to_csv())?;

    if let Some(raw) = &args.support_thresholds {
        let thresholds = parse_thresholds(raw)?;
        let count = if support_sample == 0 || support_sample >= queries.len() {
            queries.len()
        } else {
            support_sample
        };
        let mut csv = String::from("sample");
        for t in &thresholds {
            csv.push_str(&format!(",size_at_{t}"));
        }
        csv.push('\n');
        let mut sizes: Vec<Vec<usize>> = vec![Vec::with_capacity(count); thresholds.len()];
        let mut sims = vec![0.0f64; gallery.len()];
        for i in 0..count {
            let q = queries.row_f64(i);
            for (g, s) in sims.iter_mut().enumerate() {
                *s = gallery.dot_with(g, &q);
            }
            // Queries are disjoint from the gallery: no self entry to zero.
            probs_from_sims_leave_one_out(&mut sims, None, temperature);
            csv.push_str(&i.to_string());
            for (ti, &t) in thresholds.iter().enumerate() {
                let size = support_size_of_probs(&sims, t);
                sizes[ti].push(size);
                csv.push_str(&format!(",{size}"));
            }
            csv.push('\n');
        }
        write_file(&out_dir.join("support_hist.csv"), &csv)?;
        for (ti, t) in thresholds.iter().enumerate() {
            sizes[ti].sort_unstable();
            let median = sizes[ti][sizes[ti].len() / 2];
            println!("support@{t}   median {median} of {} gallery items", gallery.len());
        }
    }
    Ok(())
}

pub fn cmd_induction(args: InductionArgs) -> Result<(), CliError> {
    let mut r = Resolver::new(FileConfig::load(args.config.as_deref())?);
    let k = r.value("k", args.k, 30)?;
    let hierarchy = LabelHierarchy::load(&args.hierarchy)?;
    let train = load_dataset(&args.train_data.as_data_args(), "train")?;
    let test = load_dataset(&args.test_data.as_data_args(), "test")?;
    let out_dir = args.out_dir.unwrap_or_else(|| PathBuf::from("."));

    let run = |ckpt_path: &Path, name: &str| -> Result<EvalReport, CliError> {
        let ckpt = Checkpoint::load(ckpt_path)?;
        let temperature = args
            .temperature
            .or_else(|| echo_value(&ckpt.config_echo, "sigma").and_then(|s| s.parse().ok()))
            .unwrap_or(0.05);
        let cfg = KnnConfig::new(k, temperature)?;
        let gallery = checkpoint_gallery(&ckpt, &train)?;
        let queries = checkpoint_gallery(&ckpt, &test)?;
        let report = induction_accuracy(&gallery, &queries, &hierarchy, &cfg)?;
        write_file(&out_dir.join(format!("induction_{name}.csv")), &report.to_csv())?;
        Ok(report)
    };

    let nca = run(&args.nca_checkpoint, "nca")?;
    println!("nca          top-1 {:.2}%", 100.0 * nca.top1);
    if let Some(baseline_path) = &args.baseline_checkpoint {
        let baseline = run(baseline_path, "baseline")?;
        println!("baseline     top-1 {:.2}%", 100.0 * baseline.top1);
        println!("difference   {:+.2} points", 100.0 * (nca.top1 - baseline.top1));
    }
    Ok(())
}

pub fn cmd_fewshot(args: FewshotArgs) -> Result<(), CliError> {
    let mut r = Resolver::new(FileConfig::load(args.config.as_deref())?);
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let episodes = r.value("episodes", args.episodes, 3000)?;
    let queries = r.value("queries", args.queries, 1)?;
    let seed = r.value("seed", args.seed, 0)?;
    let default_temp = echo_value(&ckpt.config_echo, "sigma")
        .and_then(|s| s.parse::<f64>().ok())
        .unwrap_or(0.05);
    let temperature = r.value("temperature", args.temperature, default_temp)?;
    let out_dir = args.out_dir.unwrap_or_else(|| PathBuf::from("."));

    let pool_data = load_dataset(&args.pool, "pool")?;
    let pool = checkpoint_gallery(&ckpt, &pool_data)?;

    let settings: Vec<(usize, usize)> = match (args.way, args.shot) {
        (Some(w), Some(s)) => vec![(w, s)],
        (Some(w), None) => vec![(w, 1), (w, 5)],
        (None, Some(s)) => vec![(5, s), (20, s)],
        (None, None) => vec![(5, 1), (5, 5), (20, 1), (20, 5)],
    };

    let mut csv = String::from("way,shot,k,episodes,mean,half_width\n");
    for (way, shot) in settings {
        let report = fewshot_eval(&pool, way, shot, episodes, queries, temperature, seed)?;
        let stats = report.episodes.as_ref().expect("episodic report");
        match stats.half_width {
            Some(h) => println!(
                "{way}-way {shot}-shot  {:.1} +/- {:.1}  (k={}, {} episodes)",
                100.0 * stats.mean,
                100.0 * h,
                stats.k_used,
                stats.episodes
            ),
            None => println!(
                "{way}-way {shot}-shot  {:.1}  (k={}, {} episodes)",
                100.0 * stats.mean,
                stats.k_used,
                stats.episodes
            ),
        }
        csv.push_str(&format!(
            "{way},{shot},{},{},{:.6},{}\n",
            stats.k_used,
            stats.episodes,
            stats.mean,
            stats.half_width.map_or(String::new(), |h| format!("{h:.6}"))
        ));
    }
    write_file(&out_dir.join("fewshot.csv"), &csv)?;
    Ok(())
}

pub fn cmd_gradcheck(args: GradcheckArgs) -> Result<(), CliError> {
    let settings = GradCheckSettings {
        seed: args.seed.unwrap_or(0),
        instances: args.instances.unwrap_or(20),
        fault_sign_flip: args.fault == Some(FaultArg::SignFlip),
    };
    let results = run_standard_checks(&settings);
    let mut all_passed = true;
    for r in &results {
        println!(
            "{:<24} max rel error {:>12.3e}  (tolerance {:.0e})  {}",
            r.name,
            r.max_rel_error,
            r.tolerance,
            if r.passed() { "PASS" } else { "FAIL" }
        );
        all_passed &= r.passed();
    }
    if all_passed {
        Ok(())
    } else {
        Err(CliError::CheckFailed("gradient checks exceeded tolerance".into()))
    }
}

pub fn cmd_synth(args: SynthArgs) -> Result<(), CliError> {
    let mut r = Resolver::new(FileConfig::load(args.config.as_deref())?);
    std::fs::create_dir_all(&args.out_dir)
        .map_err(|e| CliError::Io(format!("{}: {e}", args.out_dir.display())))?;
    let seed = r.value("seed", args.seed, 0)?;
    match args.kind {
        SynthKindArg::Images => {
            let mut spec = ImageBenchmarkSpec { seed, ..ImageBenchmarkSpec::desk_default() };
            spec.classes = r.value("classes", args.classes, spec.classes)?;
            spec.modes_per_class =
                r.value("modes-per-class", args.modes_per_class, spec.modes_per_class)?;
            spec.train_per_class =
                r.value("train-per-class", args.train_per_class, spec.train_per_class)?;
            spec.test_per_class =
                r.value("test-per-class", args.test_per_class, spec.test_per_class)?;
            let bench = synth_image_benchmark(&spec)?;
            let paths = bench.write_idx(&args.out_dir)?;
            r.record("kind", "images");
            write_file(&args.out_dir.join("synth.cfg"), &r.echo())?;
            println!("train        {}", paths.train_images.display());
            println!("test         {}", paths.test_images.display());
        }
        SynthKindArg::Hierarchy => {
            let defaults = SyntheticSpec::default();
            let spec = SyntheticSpec {
                coarse_count: r.value("coarse", args.coarse, defaults.coarse_count)?,
                fine_per_coarse: r.value(
                    "fine-per-coarse",
                    args.fine_per_coarse,
                    defaults.fine_per_coarse,
                )?,
                samples_per_fine: r.value(
                    "samples-per-fine",
                    args.samples_per_fine,
                    defaults.samples_per_fine,
                )?,
                input_dim: r.value("input-dim", args.input_dim, defaults.input_dim)?,
                intra_fine_stddev: r.value(
                    "intra-stddev",
                    args.intra_stddev,
                    defaults.intra_fine_stddev,
                )?,
                inter_fine_scale: r.value("inter-fine", args.inter_fine, defaults.inter_fine_scale)?,
                inter_coarse_scale: r.value(
                    "inter-coarse",
                    args.inter_coarse,
                    defaults.inter_coarse_scale,
                )?,
                seed,
            };
            let train_fraction = r.value("train-fraction", args.train_fraction, 0.8)?;
            let (dataset, hierarchy) = synth_hierarchical(&spec)?;
            let (train, test) = stratified_split(&dataset, train_fraction, seed);
            let schema = DelimitedSchema { delimiter: Delimiter::Whitespace, has_header: false };
            write_delimited(&train, &args.out_dir.join("train.tsv"), &schema)?;
            write_delimited(&test, &args.out_dir.join("test.tsv"), &schema)?;
            hierarchy.save(&args.out_dir.join("hierarchy.txt"))?;
            r.record("kind", "hierarchy");
            write_file(&args.out_dir.join("synth.cfg"), &r.echo())?;
            println!("train        {}", args.out_dir.join("train.tsv").display());
            println!("test         {}", args.out_dir.join("test.tsv").display());
            println!("hierarchy    {}", args.out_dir.join("hierarchy.txt").display());
        }
    }
    Ok(())
}
