use clap::{Parser, Subcommand};
use coachsim_core::artifacts::{fit_best, read_config, Artifacts, GenerateConfig};
use coachsim_core::expert::{generate_expert_demos, DemoConfig, ExpertBank};
use coachsim_core::io::write_json;
use coachsim_core::protocol::{read_runlog, table_from_runlog, PracticeArm, StudyConfig};
use coachsim_core::session::SessionConfig;
use coachsim_core::skills::{
    attach_annotations, compression_ratio, default_cluster_map, label_demos, load_annotations, reconstruction_mse,
    segment_dp, synthesize_annotations, ClusterMap, LabeledDemo, SkillLibrary,
};
use coachsim_core::track::{default_track, Track, TrackRecipe};
use coachsim_core::trajectory::Trajectory;
use coachsim_core::zpd::{average_trajectories, choose_skill, zpd_scores, ZpdReport};
use coachsim_core::{Error, Result};
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "coachsim", version, about = "Shared-autonomy skill coaching on a simulated race track")]
struct Cli {
    /// Seed for the subcommand's random streams.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON configuration for the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Accept stage plans other than 2/2/1/5 min/3 and longer trials.
    #[arg(long, global = true)]
    allow_custom_protocol: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Build a track from a recipe (config) into track.json.
    GenTrack,
    /// Drive expert demos with the autopilot (config: demo settings).
    GenExpert {
        #[arg(long)]
        track: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        demos: usize,
    },
    /// Fit the skill library by EM (config: generation settings).
    FitSkills {
        #[arg(long)]
        track: Option<PathBuf>,
        /// Bank manifest.json.
        #[arg(long)]
        bank: Option<PathBuf>,
        /// Feedback annotations; synthesized when absent.
        #[arg(long)]
        annotations: Option<PathBuf>,
        #[arg(long)]
        cluster_map: Option<PathBuf>,
    },
    /// Segment trajectories with a fitted library.
    Segment {
        #[arg(long)]
        library: PathBuf,
        #[arg(long)]
        track: Option<PathBuf>,
        #[arg(long)]
        annotations: Option<PathBuf>,
        /// Trajectory CSV files.
        #[arg(required = true)]
        trajectories: Vec<PathBuf>,
    },
    /// Coach decision for one student from stage files (config: study).
    Zpd {
        /// Unassisted trajectory CSVs (stages 1 and 3).
        #[arg(long, required = true, num_args = 1..)]
        unassisted: Vec<PathBuf>,
        /// Assisted trajectory CSVs (stage 2).
        #[arg(long, required = true, num_args = 1..)]
        assisted: Vec<PathBuf>,
    },
    /// Run the five-stage study over a simulated cohort (config: study).
    RunStudy,
    /// Rebuild the comparison table from a run log.
    Report {
        /// runlog.jsonl, or the run directory holding it.
        run: PathBuf,
    },
    /// Host live sessions over websockets (config: session).
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 1 })
        }
    }
}

fn out_dir(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn load_track(path: &Option<PathBuf>) -> Result<Track> {
    match path {
        Some(p) => Track::load(p),
        None => Ok(default_track()),
    }
}

fn config_or_default<T: serde::de::DeserializeOwned + Default>(path: &Option<PathBuf>) -> Result<T> {
    match path {
        Some(p) => read_config(p),
        None => Ok(T::default()),
    }
}

#[derive(Serialize)]
struct FitSummary {
    objective: Vec<f64>,
    converged: bool,
    restarts: usize,
    compression_ratio: f64,
    reconstruction_mse: f64,
    warnings: Vec<String>,
}

#[derive(Serialize)]
struct SegmentOutput {
    file: PathBuf,
    segmentation: coachsim_core::skills::Segmentation,
    compression_ratio: f64,
}

fn run(cli: Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::GenTrack => {
            let recipe: TrackRecipe = match &cli.config {
                Some(p) => read_config(p)?,
                None => TrackRecipe::default_recipe(),
            };
            let file = recipe.build()?;
            Track::new(file.clone())?;
            let path = out_dir(&cli, ".").join("track.json");
            write_json(&path, &file)?;
            println!("{}", path.display());
        }
        Cmd::GenExpert { track, demos } => {
            let track = load_track(track)?;
            let cfg: DemoConfig = config_or_default(&cli.config)?;
            let bank = generate_expert_demos(&track, *demos, cli.seed.unwrap_or(0), &cfg)?;
            let manifest = bank.save(&out_dir(&cli, "expert"))?;
            println!("{}", manifest.display());
        }
        Cmd::FitSkills {
            track,
            bank,
            annotations,
            cluster_map,
        } => {
            let mut gen: GenerateConfig = config_or_default(&cli.config)?;
            if let Some(s) = cli.seed {
                gen.fit.seed = s;
                gen.annotation_seed = s;
            }
            let track = load_track(track)?;
            let bank = match bank {
                Some(p) => ExpertBank::load_manifest(p, &track)?,
                None => generate_expert_demos(&track, gen.demos, gen.expert_seed, &gen.demo)?,
            };
            let cmap = match cluster_map {
                Some(p) => ClusterMap::load(p)?,
                None => default_cluster_map(),
            };
            let out = out_dir(&cli, ".");
            let anns = match annotations {
                Some(p) => load_annotations(p)?,
                None => {
                    let hz: Vec<Trajectory> =
                        bank.demos().iter().map(|d| d.resample_1hz(&track)).collect::<Result<_>>()?;
                    let anns = synthesize_annotations(&track, &hz, &cmap, &gen.annotation, gen.annotation_seed);
                    write_json(&out.join("annotations.json"), &anns)?;
                    anns
                }
            };
            let (demos, warnings) = label_demos(&track, bank.demos(), &anns)?;
            let fit = fit_best(&demos, &gen.fit, gen.fit_restarts)?;
            let ratio = fit.segmentations.iter().map(compression_ratio).sum::<f64>() / fit.segmentations.len() as f64;
            let mse = reconstruction_mse(&demos, &fit.library, &fit.segmentations);
            write_json(&out.join("skill_library.json"), &fit.library)?;
            write_json(&out.join("segmentations.json"), &fit.segmentations)?;
            write_json(
                &out.join("fit_report.json"),
                &FitSummary {
                    objective: fit.objective.clone(),
                    converged: fit.converged,
                    restarts: fit.restarts,
                    compression_ratio: ratio,
                    reconstruction_mse: mse,
                    warnings,
                },
            )?;
            println!("compression ratio {ratio:.3}, reconstruction mse {mse:.4}");
        }
        Cmd::Segment {
            library,
            track,
            annotations,
            trajectories,
        } => {
            let gen: GenerateConfig = config_or_default(&cli.config)?;
            let track = load_track(track)?;
            let lib = SkillLibrary::load(library)?;
            let anns = match annotations {
                Some(p) => load_annotations(p)?,
                None => Vec::new(),
            };
            let mut out = Vec::new();
            for f in trajectories {
                let hz = Trajectory::read_csv(f, &track)?.resample_1hz(&track)?;
                let labels = attach_annotations(&hz, &anns).labels;
                let demo = LabeledDemo::from_trajectory(&track, &hz, labels)?;
                let seg = segment_dp(&demo, &lib, &gen.fit.segment)?;
                out.push(SegmentOutput {
                    file: f.clone(),
                    compression_ratio: compression_ratio(&seg),
                    segmentation: seg,
                });
            }
            let path = out_dir(&cli, ".").join("segmentation.json");
            write_json(&path, &out)?;
            println!("{}", path.display());
        }
        Cmd::Zpd { unassisted, assisted } => {
            let cfg = study_config(&cli)?;
            let art = Artifacts::load(&cfg.artifacts, &cfg.generate)?;
            let read = |files: &[PathBuf]| -> Result<Trajectory> {
                let trajs = files
                    .iter()
                    .map(|f| Trajectory::read_csv(f, &art.track)?.resample_1hz(&art.track))
                    .collect::<Result<Vec<_>>>()?;
                average_trajectories(&trajs, &art.track)
            };
            let own = read(unassisted)?;
            let helped = read(assisted)?;
            let scores = zpd_scores(&art.reference, &own, &helped, &cfg.zpd, art.library.len());
            let decision = choose_skill(&scores, &art.library, &art.cmap)?;
            let report = ZpdReport::new(&scores, &decision);
            let path = out_dir(&cli, ".").join("zpd_decision.json");
            write_json(&path, &report)?;
            println!("practice {} (skill {})", decision.control, decision.skill);
        }
        Cmd::RunStudy => {
            let cfg = study_config(&cli)?;
            let out = cli.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("study"));
            let art = Artifacts::load(&cfg.artifacts, &cfg.generate)?;
            let result = coachsim_core::protocol::run_study(&cfg, &art)?;
            result.write(&out, &art)?;
            let aborted = result.students.iter().filter(|s| s.aborted()).count();
            let z = result.zpd_summary();
            println!(
                "{} students, {aborted} aborted, coach accuracy {}",
                result.students.len(),
                z.accuracy.map_or("n/a".into(), |a| format!("{a:.2}"))
            );
            match (&result.table, &result.table_error) {
                (Some(t), _) => print!("{}", t.to_csv_string()?),
                (None, Some(e)) => eprintln!("no comparison table: {e}"),
                _ => {}
            }
            println!("{}", out.display());
        }
        Cmd::Report { run } => {
            let log = if run.is_dir() { run.join("runlog.jsonl") } else { run.clone() };
            let dir = log.parent().map(Path::to_path_buf).unwrap_or_default();
            let records = read_runlog(&coachsim_core::io::read_text(&log)?)?;
            let cfg: Option<StudyConfig> = cli.config.as_ref().map(|p| StudyConfig::load(p)).transpose()?;
            let track = match &cfg {
                Some(c) => load_track(&c.artifacts.track)?,
                None => default_track(),
            };
            let arms: Vec<String> = match &cfg {
                Some(c) => c.practice_arms.iter().map(|a| a.to_string()).collect(),
                None => {
                    let mut seen: Vec<PracticeArm> = records.iter().map(|r| r.practice_arm).collect();
                    seen.sort();
                    seen.dedup();
                    seen.iter().map(|a| a.to_string()).collect()
                }
            };
            let table = table_from_runlog(&records, &dir, &track, &arms)?;
            let out = cli.out.clone().unwrap_or_else(|| dir.join("report"));
            coachsim_core::io::write_text(&out.join("delta_table.csv"), &table.to_csv_string()?)?;
            write_json(&out.join("delta_table.json"), &table)?;
            print!("{}", table.to_csv_string()?);
        }
        Cmd::Serve { port } => {
            let mut cfg: SessionConfig = match &cli.config {
                Some(p) => SessionConfig::load(p)?,
                None => SessionConfig::default(),
            };
            if let Some(o) = &cli.out {
                cfg.out = Some(o.clone());
            }
            cfg.validate(cli.allow_custom_protocol)?;
            let art = Artifacts::load(&cfg.artifacts, &cfg.generate)?;
            let rt = tokio::runtime::Runtime::new().map_err(|e| Error::runtime(e.to_string()))?;
            rt.block_on(async {
                let listener = coachsim_server::bind(*port).await?;
                coachsim_server::serve(listener, coachsim_server::AppState::new(cfg, art)).await
            })?;
        }
    }
    Ok(())
}

fn study_config(cli: &Cli) -> Result<StudyConfig> {
    let mut cfg = match &cli.config {
        Some(p) => StudyConfig::load(p)?,
        None => StudyConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate(cli.allow_custom_protocol)?;
    Ok(cfg)
}
