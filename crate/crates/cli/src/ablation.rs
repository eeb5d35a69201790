//! Controlled comparisons: every arm shares the model, data and seed.

use quept::calibrate::CalibratedModel;
use quept::model::{CalibSet, ToyModel};
use quept::tensor::mae;
use quept::{calibrate_model, BitWidth, CalibConfig, LossKind, MergeCase, MergePolicy, QuantSetup, SharingMode};

use crate::args::Study;

#[derive(Debug, Clone)]
pub struct Arm {
    pub name: String,
    pub setup: QuantSetup,
    pub config: CalibConfig,
}

#[derive(Debug, Clone)]
pub struct ArmResult {
    pub name: String,
    /// End-to-end MAE against full precision per calibrated bit-width.
    pub mae: Vec<(BitWidth, f64)>,
}

fn arm(name: &str, setup: QuantSetup, config: CalibConfig) -> Arm {
    Arm {
        name: name.to_string(),
        setup,
        config,
    }
}

pub fn arms(study: Study, setup: &QuantSetup, config: &CalibConfig) -> Vec<Arm> {
    let policy = config.merge.unwrap_or_default();
    match study {
        Study::Tome => [
            ("case1-random", MergeCase::RandomSelection),
            ("case2-uniform", MergeCase::UniformFusion),
            ("case3-selective", MergeCase::SelectiveMerge),
        ]
        .into_iter()
        .map(|(name, case)| {
            let merge = Some(MergePolicy { case, ..policy });
            arm(name, setup.clone(), CalibConfig { merge, ..config.clone() })
        })
        .collect(),
        Study::Lora => [SharingMode::FullyShared, SharingMode::Independent, SharingMode::Cascaded]
            .into_iter()
            .map(|sharing| arm(&sharing.to_string(), QuantSetup { sharing, ..setup.clone() }, config.clone()))
            .collect(),
        Study::Modules => {
            let row = |clip: bool, clora: bool, tome: bool, mae: bool| {
                let flag = |on: bool| if on { "on" } else { "off" };
                let name = format!("clip-{}/clora-{}/tome-{}/mae-{}", flag(clip), flag(clora), flag(tome), flag(mae));
                let sharing = if clora { SharingMode::Cascaded } else { SharingMode::Independent };
                let config = CalibConfig {
                    learn_clips: clip,
                    merge: tome.then_some(policy),
                    loss: if mae { LossKind::Mae } else { LossKind::Mse },
                    ..config.clone()
                };
                arm(&name, QuantSetup { sharing, ..setup.clone() }, config)
            };
            vec![
                row(false, false, false, false),
                row(true, false, false, false),
                row(true, true, false, false),
                row(true, false, true, false),
                row(true, true, true, false),
                row(true, true, true, true),
            ]
        }
    }
}

pub fn end_to_end_mae(cal: &CalibratedModel<f32>, data: &CalibSet<f32>, b: BitWidth) -> quept::Result<f64> {
    let fp = cal.model.forward_fp(&data.data)?;
    let q = cal.forward(&data.data, &cal.uniform_bits(b))?;
    Ok(mae(&q, &fp)? as f64)
}

pub fn run_arm(model: &ToyModel<f32>, calib: &CalibSet<f32>, arm: &Arm) -> quept::Result<ArmResult> {
    log::info!("ablation arm {}", arm.name);
    let cal = calibrate_model(model.clone(), calib, arm.setup.clone(), &arm.config, |_| {})?;
    let mae = cal
        .bits()
        .into_iter()
        .map(|b| Ok((b, end_to_end_mae(&cal, calib, b)?)))
        .collect::<quept::Result<_>>()?;
    Ok(ArmResult {
        name: arm.name.clone(),
        mae,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn studies_vary_one_factor() {
        let (setup, config) = (QuantSetup::default(), CalibConfig::default());
        let tome = arms(Study::Tome, &setup, &config);
        assert_eq!(tome.len(), 3);
        assert!(tome.iter().all(|a| a.setup == setup && a.config.steps == config.steps));
        let lora = arms(Study::Lora, &setup, &config);
        let modes: Vec<_> = lora.iter().map(|a| a.setup.sharing).collect();
        assert_eq!(modes, [SharingMode::FullyShared, SharingMode::Independent, SharingMode::Cascaded]);
        assert!(lora.iter().all(|a| a.config == config));
    }

    #[test]
    fn module_rows_build_up() {
        let rows = arms(Study::Modules, &QuantSetup::default(), &CalibConfig::default());
        assert_eq!(rows.len(), 6);
        let base = &rows[0];
        assert!(!base.config.learn_clips && base.config.merge.is_none());
        assert_eq!(base.config.loss, LossKind::Mse);
        assert_eq!(base.setup.sharing, SharingMode::Independent);
        let full = &rows[5];
        assert!(full.config.learn_clips && full.config.merge.is_some());
        assert_eq!(full.config.loss, LossKind::Mae);
        assert_eq!(full.setup.sharing, SharingMode::Cascaded);
    }
}
