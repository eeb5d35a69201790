use quept::calibrate::{CalibratedModel, SampledBits, StepRecord};
use quept::deploy::{configure, BitConfig};
use quept::mixed::{allocate_dp, sensitivity_table, Budget};
use quept::model::{gen_calib, CalibSet, ToyModel};
use quept::optim::Adam;
use quept::tensor::mae;
use quept::{
    calibrate_model, BitWidth, CalibConfig, LayerBits, ModelDims, QueptError, QuantSetup, RankPartition, Tensor,
    TierPartition,
};

fn bw(b: u32) -> BitWidth {
    BitWidth::new(b).unwrap()
}

fn tiny_dims(blocks: usize) -> ModelDims {
    ModelDims {
        blocks,
        hidden: 16,
        heads: 2,
        tokens: 4,
        mlp_ratio: 2,
    }
}

fn tiny_setup() -> QuantSetup {
    QuantSetup {
        ranks: RankPartition::new(2, 2, 2).unwrap(),
        ..Default::default()
    }
}

fn tiny_config(steps: usize) -> CalibConfig {
    CalibConfig {
        steps,
        batch_size: 4,
        ..Default::default()
    }
}

fn tiny() -> (ToyModel<f32>, CalibSet<f32>) {
    let dims = tiny_dims(2);
    (
        ToyModel::generate(dims, 11).unwrap(),
        gen_calib(12, 16, dims.tokens, dims.hidden).unwrap(),
    )
}

fn calibrated(steps: usize) -> (CalibratedModel<f32>, Vec<StepRecord>) {
    let (model, calib) = tiny();
    let mut log = Vec::new();
    let cal = calibrate_model(model, &calib, tiny_setup(), &tiny_config(steps), |r| log.push(*r)).unwrap();
    (cal, log)
}

#[test]
fn weights_and_activation_scales_stay_frozen() {
    let (model, calib) = tiny();
    let before = CalibratedModel::init(model.clone(), &calib, tiny_setup(), 0).unwrap();
    let mut after = before.clone();
    after.calibrate(&calib, &tiny_config(20), |_| {}).unwrap();
    assert_eq!(after.model, model);
    for (a, b) in before.layers.iter().zip(&after.layers) {
        assert_eq!(a.act_scales, b.act_scales);
    }
    assert_ne!(before.store.write_count(), after.store.write_count());
}

#[test]
fn step_count_and_log_shape() {
    let (cal, log) = calibrated(10);
    assert_eq!(cal.optimizer_steps(), 3 * 10 * 2);
    assert_eq!(log.len(), 20);
    assert_eq!((log[0].block, log[0].step), (0, 0));
    assert_eq!((log[19].block, log[19].step), (1, 9));
    for r in &log {
        assert!(r.b_l < r.b_m && r.b_m < r.b_h);
    }
}

#[test]
fn calibration_is_deterministic() {
    let a = calibrated(15).0.to_container().unwrap().to_bytes();
    let b = calibrated(15).0.to_container().unwrap().to_bytes();
    assert_eq!(a, b);
}

#[test]
fn low_bit_loss_falls_and_stays_above_high_bit_loss() {
    let (model, calib) = tiny();
    let mut log = Vec::new();
    let one_block = ToyModel {
        dims: tiny_dims(1),
        blocks: model.blocks[..1].to_vec(),
    };
    calibrate_model(one_block, &calib, tiny_setup(), &tiny_config(200), |r| log.push(*r)).unwrap();
    let avg = |s: &[StepRecord]| s.iter().map(|r| r.loss_l).sum::<f64>() / s.len() as f64;
    assert!(avg(&log[190..]) < avg(&log[..10]), "{} vs {}", avg(&log[190..]), avg(&log[..10]));
    for r in &log[50..] {
        assert!(r.loss_h <= r.loss_l, "step {}: {} > {}", r.step, r.loss_h, r.loss_l);
    }
}

#[test]
fn block_step_rejects_bits_outside_their_tier() {
    let (model, calib) = tiny();
    let mut cal = CalibratedModel::init(model, &calib, tiny_setup(), 0).unwrap();
    let x = calib.batch(&[0, 1]).unwrap();
    let bad = SampledBits {
        low: bw(3),
        mid: bw(5),
        high: bw(7),
    };
    let r = cal.block_step(0, &x, &x, bad, &tiny_config(1), &mut Adam::new());
    assert!(matches!(r, Err(QueptError::UnsupportedBit { bit: 3, .. })));
}

#[test]
fn empty_calibration_set_is_rejected() {
    assert!(matches!(gen_calib::<f32>(0, 0, 4, 16), Err(QueptError::Argument(_))));
    assert!(matches!(Tensor::<f32>::new(vec![0, 4, 16], vec![]), Err(QueptError::Argument(_))));
}

#[test]
fn configure_is_pure_selection() {
    let (cal, _) = calibrated(10);
    let (steps, writes) = (cal.optimizer_steps(), cal.store.write_count());
    let bytes = |cfg| configure(&cal, &cfg).unwrap().to_container().unwrap().to_bytes();
    let w8 = bytes(BitConfig::Uniform(bw(8)));
    let _w4 = bytes(BitConfig::Uniform(bw(4)));
    assert_eq!(bytes(BitConfig::Uniform(bw(8))), w8);
    for b in 4..=8 {
        configure(&cal, &BitConfig::Uniform(bw(b))).unwrap();
    }
    assert_eq!((cal.optimizer_steps(), cal.store.write_count()), (steps, writes));
}

#[test]
fn configure_rejects_unsupported_bits_by_layer() {
    let (cal, _) = calibrated(2);
    let err = configure(&cal, &BitConfig::Uniform(bw(3))).unwrap_err();
    assert!(matches!(&err, QueptError::UnsupportedBit { layer, bit: 3 } if layer == "block0.qkv"));
    let mut bits = cal.uniform_bits(bw(6));
    bits[5].weight = Some(bw(2));
    let err = configure(&cal, &BitConfig::PerLayer(bits)).unwrap_err();
    assert!(err.to_string().contains("block1.attn_out"), "{err}");
}

#[test]
fn deployable_matches_calibrated_forward() {
    let (cal, _) = calibrated(10);
    let (_, calib) = tiny();
    for b in [4, 6, 8] {
        let dep = configure(&cal, &BitConfig::Uniform(bw(b))).unwrap();
        assert_eq!(dep.forward(&calib.data).unwrap(), cal.forward(&calib.data, &cal.uniform_bits(bw(b))).unwrap());
    }
    let fp = configure(&cal, &BitConfig::FullPrecision).unwrap();
    assert_eq!(fp.forward(&calib.data).unwrap(), cal.model.forward_fp(&calib.data).unwrap());
}

#[test]
fn mixed_allocation_feeds_configure() {
    let (model, calib) = tiny();
    let setup = QuantSetup {
        partition: TierPartition::weight_only_default(),
        quantize_activations: false,
        ..tiny_setup()
    };
    let cal = calibrate_model(model, &calib, setup, &tiny_config(5), |_| {}).unwrap();
    let table = sensitivity_table(&cal, &calib.data).unwrap();
    assert_eq!(table.layers(), 8);
    for l in 0..8 {
        let row = table.row(l);
        assert!(row.iter().all(|&v| v >= 0.0));
        assert!(table.get(l, bw(2)).unwrap() >= table.get(l, bw(8)).unwrap(), "layer {l}: {row:?}");
    }
    let alloc = allocate_dp(&table, &Budget::new(4.0, 8).unwrap()).unwrap();
    assert!(alloc.average() <= 4.0);
    let dep = configure(&cal, &alloc.to_bit_config()).unwrap();
    assert!(dep.forward(&calib.data).unwrap().is_finite());
    let again = BitConfig::from_toml(&alloc.to_bit_config().to_toml()).unwrap();
    assert_eq!(again, alloc.to_bit_config());
}

#[test]
fn eight_bit_forward_is_close_to_full_precision() {
    let dims = ModelDims::default();
    let model = ToyModel::<f32>::generate(dims, 0).unwrap();
    let calib = gen_calib(1, 32, dims.tokens, dims.hidden).unwrap();
    let cal = CalibratedModel::init(model, &calib, QuantSetup::default(), 0).unwrap();
    let fp = cal.model.forward_block_fp(0, &calib.data).unwrap();
    let q = cal.forward_block(0, &calib.data, bw(8)).unwrap();
    let rel = mae(&q, &fp).unwrap() / fp.map(f32::abs).mean();
    assert!(rel <= 0.02, "relative MAE {rel}");
}

#[test]
fn disabled_quantization_is_full_precision() {
    let (cal, _) = calibrated(3);
    let (_, calib) = tiny();
    let off = vec![LayerBits::default(); 8];
    assert_eq!(cal.forward(&calib.data, &off).unwrap(), cal.model.forward_fp(&calib.data).unwrap());
}

#[test]
fn bit_config_documents() {
    assert_eq!(BitConfig::from_toml("uniform = 6").unwrap(), BitConfig::Uniform(bw(6)));
    assert_eq!(BitConfig::from_toml("full_precision = true").unwrap(), BitConfig::FullPrecision);
    assert!(BitConfig::from_toml("uniform = 9").is_err());
    assert!(BitConfig::from_toml("").is_err());
    assert!(BitConfig::from_toml("[[layer]]\nname = \"block0.mlp_up\"\nweight = 4\n").is_err());
    let doc = BitConfig::Uniform(bw(5)).to_toml();
    assert_eq!(BitConfig::from_toml(&doc).unwrap(), BitConfig::Uniform(bw(5)));
}
