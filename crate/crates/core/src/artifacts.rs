//! Everything a study or a live session needs before the first tick:
//! track, expert bank, annotations, skill library and the expert
//! segmentation, loaded from files or regenerated from seeds.

use crate::error::{Error, Result};
use crate::expert::{generate_expert_demos, DemoConfig, ExpertBank};
use crate::io::{read_json, relative_to};
use crate::skills::{
    attach_annotations, default_cluster_map, fit_library, label_demos, load_annotations, segment_dp,
    synthesize_annotations, AnnotationSynth, ClusterMap, FeedbackAnnotation, FitConfig, FitReport, LabeledDemo,
    Segmentation, SkillLibrary,
};
use crate::track::{default_track, Track};
use crate::trajectory::Trajectory;
use crate::zpd::ZpdReference;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Artifact files; anything left out is regenerated.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArtifactPaths {
    pub track: Option<PathBuf>,
    /// Bank manifest as written by `ExpertBank::save`.
    pub expert_bank: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub cluster_map: Option<PathBuf>,
    pub skill_library: Option<PathBuf>,
}

impl ArtifactPaths {
    /// Paths relative to `base` (a file) become relative to its directory.
    pub fn resolved(&self, base: &Path) -> Self {
        let r = |p: &Option<PathBuf>| p.as_ref().map(|p| relative_to(base, p));
        Self {
            track: r(&self.track),
            expert_bank: r(&self.expert_bank),
            annotations: r(&self.annotations),
            cluster_map: r(&self.cluster_map),
            skill_library: r(&self.skill_library),
        }
    }
}

/// How missing artifacts are regenerated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateConfig {
    pub demos: usize,
    pub expert_seed: u64,
    pub demo: DemoConfig,
    pub annotation: AnnotationSynth,
    pub annotation_seed: u64,
    pub fit: FitConfig,
    /// EM restarts with seeds `fit.seed..fit.seed + restarts`; the lowest
    /// final objective wins.
    pub fit_restarts: usize,
    /// Demo whose segmentation defines the ZPD segments.
    pub reference_demo: usize,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            demos: 5,
            expert_seed: 0,
            demo: DemoConfig::default(),
            annotation: AnnotationSynth::default(),
            annotation_seed: 0,
            fit: FitConfig::default(),
            fit_restarts: 3,
            reference_demo: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Artifacts {
    pub track: Track,
    pub bank: ExpertBank,
    pub cmap: ClusterMap,
    pub annotations: Vec<FeedbackAnnotation>,
    pub library: SkillLibrary,
    /// Reference demo at 1 Hz; the expert of expert_distance.
    pub expert_1hz: Trajectory,
    pub segmentation: Segmentation,
    pub reference: ZpdReference,
}

/// Best of `restarts` EM fits.
pub fn fit_best(demos: &[LabeledDemo], cfg: &FitConfig, restarts: usize) -> Result<FitReport> {
    let mut best: Option<FitReport> = None;
    for k in 0..restarts.max(1) {
        let fit = fit_library(demos, &FitConfig { seed: cfg.seed + k as u64, ..*cfg })?;
        let better = match &best {
            None => true,
            Some(b) => fit.objective.last() < b.objective.last(),
        };
        if better {
            best = Some(fit);
        }
    }
    best.ok_or_else(|| Error::runtime("no fit produced"))
}

impl Artifacts {
    pub fn load(paths: &ArtifactPaths, gen: &GenerateConfig) -> Result<Self> {
        let track = match &paths.track {
            Some(p) => Track::load(p)?,
            None => default_track(),
        };
        let bank = match &paths.expert_bank {
            Some(p) => ExpertBank::load_manifest(p, &track)?,
            None => generate_expert_demos(&track, gen.demos, gen.expert_seed, &gen.demo)?,
        };
        let cmap = match &paths.cluster_map {
            Some(p) => ClusterMap::load(p)?,
            None => default_cluster_map(),
        };
        let hz: Vec<Trajectory> = bank.demos().iter().map(|d| d.resample_1hz(&track)).collect::<Result<_>>()?;
        let annotations = match &paths.annotations {
            Some(p) => load_annotations(p)?,
            None => synthesize_annotations(&track, &hz, &cmap, &gen.annotation, gen.annotation_seed),
        };
        let library = match &paths.skill_library {
            Some(p) => SkillLibrary::load(p)?,
            None => {
                let (demos, _) = label_demos(&track, bank.demos(), &annotations)?;
                fit_best(&demos, &gen.fit, gen.fit_restarts)?.library
            }
        };
        Self::assemble(track, bank, cmap, annotations, library, gen)
    }

    pub fn assemble(
        track: Track,
        bank: ExpertBank,
        cmap: ClusterMap,
        annotations: Vec<FeedbackAnnotation>,
        library: SkillLibrary,
        gen: &GenerateConfig,
    ) -> Result<Self> {
        let k = gen.reference_demo;
        let demo = bank
            .demos()
            .get(k)
            .ok_or_else(|| Error::config(format!("reference demo {k} not in bank")))?;
        let expert_1hz = demo.resample_1hz(&track)?;
        let labels = attach_annotations(&expert_1hz, &annotations).labels;
        let labeled = LabeledDemo::from_trajectory(&track, &expert_1hz, labels)?;
        let segmentation = segment_dp(&labeled, &library, &gen.fit.segment)?;
        let reference = ZpdReference::binned(&expert_1hz, &segmentation, bank.demos(), &track)?;
        Ok(Self {
            track,
            bank,
            cmap,
            annotations,
            library,
            expert_1hz,
            segmentation,
            reference,
        })
    }
}

/// Reads a JSON config, reporting a missing file as a configuration error.
pub fn read_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    read_json(path).map_err(|e| match e {
        Error::Io { path, source } => Error::config(format!("cannot read {}: {source}", path.display())),
        Error::Json { path, source } => Error::config(format!("{}: {source}", path.display())),
        other => other,
    })
}
