//! The ablation matrix: three denoiser variants behind one tight-trained
//! predictor, plus a direct loose → pose predictor.

use crate::error::Result;
use crate::gidnet::Gid;
use crate::metrics::{evaluate_path, MetricRow};
use crate::posenet::Predictor;
use crate::trainer::{
    train_direct, train_gid, train_predictor, ClipFeatures, Dataset, EpochLog, PoseExample, RunConfig, TrainLog,
    Variant,
};

/// Fraction of training clips held back for validation and early stopping.
pub const VALIDATION_FRACTION: f64 = 0.1;

/// Everything trained by one ablation run.
pub struct AblationModels {
    pub gids: Vec<(Variant, Gid)>,
    pub predictor: Predictor,
    pub direct: Predictor,
    pub logs: Vec<(String, TrainLog)>,
}

impl AblationModels {
    pub fn gid(&self, v: Variant) -> Option<&Gid> {
        self.gids.iter().find(|(w, _)| *w == v).map(|(_, g)| g)
    }
}

/// Features for training and validation clips.
pub fn train_val_features(train: &Dataset) -> Result<(Vec<ClipFeatures>, Vec<ClipFeatures>)> {
    let (tr, va) = train.clone().split_validation(VALIDATION_FRACTION)?;
    Ok((tr.features()?, va.features()?))
}

/// Trains every model in the matrix. `progress` receives the model tag with each epoch.
pub fn train_all(
    train: &Dataset,
    run: &RunConfig,
    mut progress: Option<&mut dyn FnMut(&str, &EpochLog)>,
) -> Result<AblationModels> {
    let (tr, va) = train_val_features(train)?;
    let mut logs = Vec::new();
    let mut gids = Vec::new();
    for v in [Variant::Full, Variant::NoLsd, Variant::NoAcf] {
        let mut cb = |e: &EpochLog| {
            if let Some(p) = progress.as_mut() {
                p(v.tag(), e)
            }
        };
        let (g, log) = train_gid(&run.gid, v, &tr, &va, &run.train, Some(&mut cb))?;
        logs.push((v.tag().to_string(), log));
        gids.push((v, g));
    }
    let skel = &train.skeleton;
    let tight_tr: Vec<PoseExample> = tr.iter().map(PoseExample::tight).collect();
    let tight_va: Vec<PoseExample> = va.iter().map(PoseExample::tight).collect();
    let mut cb = |e: &EpochLog| {
        if let Some(p) = progress.as_mut() {
            p("predictor", e)
        }
    };
    let (predictor, log) = train_predictor(&run.pose, &tight_tr, &tight_va, skel, &run.train, Some(&mut cb))?;
    logs.push(("predictor".into(), log));
    let loose_tr: Vec<PoseExample> = tr.iter().map(PoseExample::loose).collect();
    let loose_va: Vec<PoseExample> = va.iter().map(PoseExample::loose).collect();
    let mut cb = |e: &EpochLog| {
        if let Some(p) = progress.as_mut() {
            p(Variant::NoFps.tag(), e)
        }
    };
    let (direct, log) = train_direct(&run.pose, &loose_tr, &loose_va, skel, &run.train, Some(&mut cb))?;
    logs.push((Variant::NoFps.tag().to_string(), log));
    Ok(AblationModels {
        gids,
        predictor,
        direct,
        logs,
    })
}

/// One row per variant, in [`Variant::ALL`] order. The no_fps row's `imu_mae` is
/// the raw loose-vs-tight error since that path has no denoiser.
pub fn ablation_rows(test: &[ClipFeatures], models: &AblationModels, data: &Dataset) -> Result<Vec<MetricRow>> {
    Variant::ALL
        .iter()
        .map(|&v| {
            let (gid, pred) = match v {
                Variant::NoFps => (None, &models.direct),
                _ => (models.gid(v), &models.predictor),
            };
            Ok(evaluate_path(v.tag(), test, gid, pred, &data.skeleton, data.rate_hz)?.0)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::garmentnoise::default_profiles;
    use crate::gidnet::GidConfig;
    use crate::kinematics::{SensorLayout, Skeleton};
    use crate::posenet::PoseNetConfig;
    use crate::trainer::{generate, GenConfig, TrainConfig};

    #[test]
    fn matrix_has_four_tagged_rows() {
        let skel = Skeleton::default_16();
        let layout = SensorLayout::default_for(&skel).unwrap();
        let gen = GenConfig {
            minutes: 0.1,
            clip_seconds: 2.0,
            ..Default::default()
        };
        let data = generate(&skel, &layout, &default_profiles(), &gen).unwrap();
        let test = generate(&skel, &layout, &default_profiles(), &GenConfig { seed: 9, minutes: 0.05, ..gen }).unwrap();
        let run = RunConfig {
            train: TrainConfig {
                max_epochs: 1,
                ..Default::default()
            },
            gid: GidConfig {
                window: 8,
                model_dim: 8,
                heads: 2,
                ffn_hidden: 8,
                expert_hidden: 8,
                refine_dim: 8,
                ..Default::default()
            },
            pose: PoseNetConfig {
                window: 8,
                model_dim: 8,
                heads: 2,
                ffn_hidden: 8,
                layers: 1,
                ..Default::default()
            },
        };
        let mut seen = Vec::new();
        let mut cb = |tag: &str, _: &EpochLog| seen.push(tag.to_string());
        let models = train_all(&data, &run, Some(&mut cb)).unwrap();
        assert_eq!(seen, ["full", "no_lsd", "no_acf", "predictor", "no_fps"]);
        let rows = ablation_rows(&test.features().unwrap(), &models, &data).unwrap();
        let tags: Vec<&str> = rows.iter().map(|r| r.tag.as_str()).collect();
        assert_eq!(tags, ["full", "no_lsd", "no_acf", "no_fps"]);
        assert!(rows.iter().all(|r| r.imu_mae.is_finite() && r.ang_deg >= 0.0));
    }
}
