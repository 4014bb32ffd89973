use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vla_core::harness::commands::{
    cmd_ablate, cmd_eval, cmd_gen_data, cmd_inspect_gates, cmd_inspect_memory, cmd_train, format_ablation, format_gates,
};
use vla_core::harness::eval::Variant;
use vla_core::harness::{HarnessError, RunConfig};

#[derive(Parser)]
#[command(name = "vla", about = "Train and evaluate the tabletop policy")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory that relative artifact paths resolve against.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed_data: Option<u64>,
    #[arg(long, global = true)]
    seed_model: Option<u64>,
    #[arg(long, global = true)]
    seed_train: Option<u64>,
    #[arg(long, global = true)]
    seed_eval: Option<u64>,
    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Roll out the scripted expert and write the dataset.
    GenData,
    /// Train the head (and memory) on the dataset.
    Train {
        #[arg(long)]
        unfreeze_backbone: bool,
        /// Continue from the configured checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Seeded closed-loop evaluation.
    Eval {
        #[arg(long, default_value = "in-dist")]
        variant: String,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate all four module combinations per seed.
    Ablate {
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Per-layer, per-head gate values averaged over one episode.
    InspectGates {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        episode: usize,
    },
    /// Key/value distance correlation of the stored memory.
    InspectMemory {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        probes: usize,
    },
}

fn load_config(c: &Common) -> Result<RunConfig, HarnessError> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &c.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| HarnessError::Usage(format!("expected KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    let seeds = [
        (&mut cfg.seed_data, c.seed_data),
        (&mut cfg.seed_model, c.seed_model),
        (&mut cfg.seed_train, c.seed_train),
        (&mut cfg.seed_eval, c.seed_eval),
    ];
    for (slot, v) in seeds {
        if let Some(v) = v {
            *slot = v;
        }
    }
    if let Some(dir) = &c.out {
        std::fs::create_dir_all(dir).map_err(HarnessError::io(dir))?;
        cfg.rebase(dir);
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    let mut cfg = load_config(&cli.common)?;
    match cli.cmd {
        Cmd::GenData => {
            let n = cmd_gen_data(&cfg)?;
            println!("wrote {n} records to {}", cfg.dataset.display());
        }
        Cmd::Train { unfreeze_backbone, resume } => {
            cfg.unfreeze_backbone |= unfreeze_backbone;
            let s = cmd_train(&cfg, resume)?;
            println!("trained to step {}, last loss {:.6}, memory {} entries", s.steps, s.final_loss, s.memory_len);
            println!("backbone checksum {} -> {}", s.backbone_before, s.backbone_after);
        }
        Cmd::Eval { variant, episodes, checkpoint } => {
            let v = Variant::parse(&variant).ok_or_else(|| HarnessError::Usage(format!("unknown variant `{variant}`")))?;
            let ckpt = checkpoint.unwrap_or_else(|| cfg.checkpoint.clone());
            let out = cmd_eval(&cfg, &ckpt, v, episodes.unwrap_or(cfg.eval_episodes))?;
            println!("episode,seed,success,steps,ticks");
            for e in &out.report.episodes {
                println!("{},{},{},{},{}", e.index, e.seed, e.success, e.steps, e.ticks);
            }
            println!("{} success rate {:.4}", v.as_str(), out.report.success_rate);
            if let Some((base, drop)) = out.reference {
                println!("in-dist success rate {base:.4}, drop {drop:.2}%");
            }
        }
        Cmd::Ablate { seeds } => {
            let dir = cli.common.out.clone().unwrap_or_else(|| PathBuf::from(".")).join("ablate");
            print!("{}", format_ablation(&cmd_ablate(&cfg, &seeds, &dir)?));
        }
        Cmd::InspectGates { checkpoint, episode } => {
            let ckpt = checkpoint.unwrap_or_else(|| cfg.checkpoint.clone());
            print!("{}", format_gates(&cmd_inspect_gates(&cfg, &ckpt, episode)?));
        }
        Cmd::InspectMemory { checkpoint, probes } => {
            let ckpt = checkpoint.unwrap_or_else(|| cfg.checkpoint.clone());
            let r = cmd_inspect_memory(&cfg, &ckpt, probes)?;
            println!("entries,{}\nl1,{:.6}\ncosine,{:.6}", r.entries, r.l1, r.cosine);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
