use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};
use duostream_core::data::{load_dataset, synth_dataset, write_dataset, LoadOptions};
use duostream_core::gradcheck::{gradcheck_model, GradCheckOptions};
use duostream_core::trainer::{
    evaluate, parse_pairs, predict, prepare_data, train_with, RunConfig, TrainOptions, TrainingState,
    BEST_CHECKPOINT, KEYS,
};
use duostream_core::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Contract(_) | Error::Range { .. } => EXIT_USAGE,
        Error::Numerical(_) => EXIT_NUMERICAL,
        Error::Ingest(_)
        | Error::Image { .. }
        | Error::Corrupt(_)
        | Error::Version { .. }
        | Error::ConfigMismatch { .. }
        | Error::Io(_) => EXIT_DATA,
    }
}

fn config_flags() -> Vec<Arg> {
    KEYS.iter()
        .map(|&k| Arg::new(k).long(k).value_name("VALUE").help_heading("Run configuration (mirrors config-file keys)"))
        .collect()
}

fn common_flags() -> Vec<Arg> {
    ["config", "seed", "data-root", "out-dir"]
        .into_iter()
        .map(|k| Arg::new(k).long(k).value_name("VALUE"))
        .collect()
}

fn cli() -> Command {
    let checkpoint = Arg::new("checkpoint")
        .long("checkpoint")
        .value_name("PATH")
        .help("Checkpoint to load (default: <out-dir>/best.ckpt)");
    let force = Arg::new("force").long("force").action(ArgAction::SetTrue).help("Ignore a config hash mismatch");
    let config = Arg::new("config").long("config").value_name("PATH").help("Flat `key = value` config file");
    Command::new("duostream")
        .about("Dual-stream CNN + lightweight attention image classifier")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .subcommand(
            Command::new("train")
                .about("Train a model, logging metrics.csv and checkpoints to the output directory")
                .arg(config.clone())
                .args(config_flags())
                .arg(Arg::new("resume").long("resume").value_name("PATH").help("Continue from a checkpoint"))
                .arg(Arg::new("stop-after").long("stop-after").value_name("EPOCHS").value_parser(clap::value_parser!(usize)))
                .arg(force.clone())
                .arg(Arg::new("inject-nan-at-step").long("inject-nan-at-step").hide(true).value_parser(clap::value_parser!(u64))),
        )
        .subcommand(
            Command::new("eval")
                .about("Accuracy and confusion matrix of a checkpoint on its test split or on --data-root")
                .args(common_flags())
                .arg(checkpoint.clone())
                .arg(force.clone()),
        )
        .subcommand(
            Command::new("predict")
                .about("Class probabilities for PPM/PGM images")
                .args(common_flags())
                .arg(checkpoint)
                .arg(force)
                .arg(Arg::new("images").value_name("IMAGE").num_args(1..).required(true)),
        )
        .subcommand(
            Command::new("gradcheck")
                .about("Finite-difference check of every parameter gradient (miniature model by default)")
                .arg(config.clone())
                .args(config_flags())
                .arg(Arg::new("coords").long("coords").value_name("N").value_parser(clap::value_parser!(usize)))
                .arg(Arg::new("inject-gelu-fault").long("inject-gelu-fault").hide(true).value_parser(clap::value_parser!(f64))),
        )
        .subcommand(
            Command::new("synth")
                .about("Write the synthetic corpus as <out-dir>/<class>/*.ppm")
                .arg(config)
                .args(config_flags()),
        )
}

/// Config-file assignments followed by CLI flags, so flags win.
fn gather_pairs(m: &ArgMatches, base: &[(&str, &str)]) -> Result<Vec<(String, String)>, Error> {
    let mut pairs: Vec<(String, String)> = base.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    if let Some(path) = m.get_one::<String>("config") {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {path}: {e}")))?;
        pairs.extend(parse_pairs(&text)?);
    }
    for id in m.ids() {
        let key = id.as_str();
        if key != "config" && KEYS.contains(&key) {
            if let Some(v) = m.get_one::<String>(key) {
                pairs.push((key.to_string(), v.clone()));
            }
        }
    }
    Ok(pairs)
}

fn run_train(m: &ArgMatches) -> Result<u8, Error> {
    let cfg = RunConfig::from_pairs(&gather_pairs(m, &[])?)?;
    let opts = TrainOptions {
        resume: m.get_one::<String>("resume").map(PathBuf::from),
        stop_after: m.get_one::<usize>("stop-after").copied(),
        force: m.get_flag("force"),
        inject_nan_at_step: m.get_one::<u64>("inject-nan-at-step").copied(),
    };
    println!("epoch  train_loss  train_acc  test_acc  lr");
    let outcome = train_with(&cfg, &opts, |r| {
        println!("{:>5}  {:>10.5}  {:>9.4}  {:>8.4}  {:.3e}", r.epoch, r.train_loss, r.train_acc, r.test_acc, r.lr);
    })?;
    let s = &outcome.state;
    println!("best test accuracy {:.4} at epoch {}; outputs in {}", s.best_test_acc, s.best_epoch, cfg.out_dir.display());
    Ok(0)
}

/// Checkpoint named by `--checkpoint`, else `best.ckpt` in the output
/// directory taken from `--out-dir` or the config file.
fn checkpoint_path(m: &ArgMatches) -> Result<PathBuf, Error> {
    if let Some(p) = m.get_one::<String>("checkpoint") {
        return Ok(PathBuf::from(p));
    }
    if let Some(dir) = m.get_one::<String>("out-dir") {
        return Ok(Path::new(dir).join(BEST_CHECKPOINT));
    }
    if let Some(path) = m.get_one::<String>("config") {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {path}: {e}")))?;
        if let Some((_, dir)) = parse_pairs(&text)?.into_iter().rev().find(|(k, _)| k == "out-dir") {
            return Ok(Path::new(&dir).join(BEST_CHECKPOINT));
        }
    }
    Err(Error::Config("no checkpoint: pass --checkpoint or --out-dir".into()))
}

fn run_eval(m: &ArgMatches) -> Result<u8, Error> {
    let state = TrainingState::load(&checkpoint_path(m)?, m.get_flag("force"))?;
    let run = state.run_config()?;
    let dataset = match m.get_one::<String>("data-root") {
        Some(root) => {
            let opts = LoadOptions { image_size: state.model.config.input_size, skip_bad: run.skip_bad_images };
            let ds = load_dataset(Path::new(root), &opts)?;
            if ds.class_names != state.class_names {
                return Err(Error::Ingest(format!(
                    "dataset classes {:?} differ from checkpoint classes {:?}",
                    ds.class_names, state.class_names
                )));
            }
            ds
        }
        None => {
            let mut run = run;
            if let Some(seed) = m.get_one::<String>("seed") {
                run.split_seed = seed.parse().map_err(|_| Error::Config(format!("seed: cannot parse `{seed}`")))?;
            }
            prepare_data(&run)?.1
        }
    };
    let ev = evaluate(&state.model, &dataset, run_batch(&state))?;
    println!("samples {}  accuracy {:.6}", ev.confusion.total(), ev.accuracy);
    print!("{}", ev.confusion.render(&state.class_names));
    Ok(0)
}

fn run_batch(state: &TrainingState) -> usize {
    state.run_config().map(|r| r.schedule.batch_size).unwrap_or(32)
}

fn run_predict(m: &ArgMatches) -> Result<u8, Error> {
    let state = TrainingState::load(&checkpoint_path(m)?, m.get_flag("force"))?;
    for image in m.get_many::<String>("images").expect("required") {
        let p = predict(&state.model, &state.class_names, Path::new(image))?;
        println!("{image}: {}", p.class_name);
        for (name, prob) in state.class_names.iter().zip(&p.probabilities) {
            println!("  {name:<16} {prob:.6}");
        }
    }
    Ok(0)
}

fn run_gradcheck(m: &ArgMatches) -> Result<u8, Error> {
    let pairs = gather_pairs(m, &[("preset", "miniature")])?;
    let mut model = RunConfig::model_from_pairs(&pairs)?;
    let mut opts = GradCheckOptions::default();
    if let Some(seed) = m.get_one::<String>("seed") {
        let seed = seed.parse().map_err(|_| Error::Config(format!("seed: cannot parse `{seed}`")))?;
        model.seed = seed;
        opts.seed = seed;
    }
    if let Some(&n) = m.get_one::<usize>("coords") {
        opts.coords_per_group = n;
    }
    opts.gelu_grad_fault = m.get_one::<f64>("inject-gelu-fault").copied();
    let report = gradcheck_model(&model, &opts)?;
    print!("{}", report.render());
    Ok(if report.passed() { 0 } else { EXIT_NUMERICAL })
}

fn run_synth(m: &ArgMatches) -> Result<u8, Error> {
    let cfg = RunConfig::from_pairs(&gather_pairs(m, &[])?)?;
    let Some(per_class) = cfg.synth_per_class else {
        return Err(Error::Config("synth needs --synth-per-class".into()));
    };
    let ds = synth_dataset(per_class, cfg.synth_classes, cfg.model.input_size, cfg.synth_seed)?;
    write_dataset(&ds, &cfg.out_dir)?;
    println!("wrote {} images in {} classes to {}", ds.len(), ds.num_classes(), cfg.out_dir.display());
    Ok(0)
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let result = match matches.subcommand() {
        Some(("train", m)) => run_train(m),
        Some(("eval", m)) => run_eval(m),
        Some(("predict", m)) => run_predict(m),
        Some(("gradcheck", m)) => run_gradcheck(m),
        Some(("synth", m)) => run_synth(m),
        _ => unreachable!("subcommand is required"),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        cli().debug_assert();
    }
}
