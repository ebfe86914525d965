use disrom::checkpoint::{self, CheckpointError};
use disrom::config::{RunConfig, ScheduleConfig};
use disrom::format::{self, FormatError, MAGIC};
use disrom_core::analysis::prune;
use disrom_core::data::{synthesize, Dataset, NormPolicy, SyntheticFlowParams};
use disrom_core::models::{Model, ModelSpec, Preset, Variant};
use disrom_core::tensor::Tensor;

fn small_flow() -> Dataset {
    let p = SyntheticFlowParams { height: 8, width: 8, period: 10, steps: 40, ..Default::default() };
    synthesize(&p).unwrap().split(0.75).unwrap().normalize(NormPolicy::Standardize).unwrap()
}

fn header_line(json: &str, payload: &[u8]) -> Vec<u8> {
    let mut b = MAGIC.to_vec();
    b.extend_from_slice(json.as_bytes());
    b.push(b'\n');
    b.extend_from_slice(payload);
    b
}

const NONE_NORM: &str = r#""normalization":{"policy":"none","shift":[0.0,0.0],"scale":[1.0,1.0]}"#;

#[test]
fn dataset_round_trip_is_bit_exact() {
    let mut d = small_flow();
    d.snapshots.data_mut()[0] = -0.0;
    d.snapshots.data_mut()[1] = f32::MIN_POSITIVE / 2.0;
    let back = format::decode(&format::encode(&d)).unwrap();
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&back.snapshots), bits(&d.snapshots));
    assert_eq!(back.snapshots.shape(), d.snapshots.shape());
    assert_eq!(back.channel_names, d.channel_names);
    assert_eq!(back.normalization, d.normalization);
    assert_eq!(back.split, d.split);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.disrom");
    format::store(&d, &path).unwrap();
    assert_eq!(bits(&format::load(&path).unwrap().snapshots), bits(&d.snapshots));
}

#[test]
fn dataset_decoding_errors() {
    let good = format::encode(&small_flow());
    assert!(matches!(format::decode(b"DISROM2\n{}\n"), Err(FormatError::BadMagic)));
    assert!(matches!(format::decode(&good[..good.len() - 3]), Err(FormatError::Truncated { .. })));
    let msg = format::decode(&good[..good.len() - 3]).unwrap_err().to_string();
    assert!(msg.contains("payload shorter than manifest"), "{msg}");
    assert!(matches!(format::decode(&header_line("{not json", &[])), Err(FormatError::Header(_))));

    // Header declares two channels; the payload holds one.
    let json = format!(r#"{{"shape":[3,2,2,2],"channels":["u","v"],{NONE_NORM},"split":2}}"#);
    let bytes = header_line(&json, &[0u8; 4 * 3 * 2 * 2]);
    assert!(matches!(format::decode(&bytes), Err(FormatError::ShapeMismatch(_))));

    let json = format!(r#"{{"shape":[3,2,2,2],"channels":["u"],{NONE_NORM},"split":2}}"#);
    let bytes = header_line(&json, &[0u8; 4 * 24]);
    assert!(matches!(format::decode(&bytes), Err(FormatError::ShapeMismatch(_))));

    let json = format!(r#"{{"shape":[3,2,2,2],"channels":["u","v"],{NONE_NORM},"split":2}}"#);
    assert!(format::decode(&header_line(&json, &[0u8; 4 * 24])).is_ok());
    assert!(matches!(format::load(std::path::Path::new("/nonexistent/x.disrom")), Err(FormatError::Io(_))));
}

#[test]
fn checkpoint_round_trip() {
    let mut model = Model::<f32>::build(&ModelSpec::preset(Preset::Toy, Variant::BetaVae, 4), 3).unwrap();
    prune(&mut model, &[1, 3]).unwrap();
    let back = checkpoint::decode(&checkpoint::encode(&model)).unwrap();
    assert_eq!(back, model);
    assert_eq!(back.pruned(), model.pruned());
    let x = small_flow().validation();
    assert_eq!(back.reconstruct(&x).unwrap(), model.reconstruct(&x).unwrap());

    let bytes = checkpoint::encode(&model);
    assert!(matches!(checkpoint::decode(&bytes[..bytes.len() - 1]), Err(CheckpointError::Payload { .. })));
    assert!(matches!(checkpoint::decode(b"nope"), Err(CheckpointError::BadMagic)));
}

#[test]
fn config_parsing_and_validation() {
    let text = r#"
output_dir = "out"
[model]
preset = "toy"
variant = "oae"
latent_dim = 3
[loss]
weight = 0.5
[train]
epochs = 4
batch_size = 8
seed = 2
schedule = { kind = "constant", lr = 0.001 }
[data]
train_fraction = 0.8
normalization = "min_max"
[data.synth]
height = 8
width = 8
period = 10
steps = 40
wavenumber = 1.0
u_amplitude = 0.3
v_amplitude = 0.2
profile_width = 0.15
mean_deficit = 0.5
seed = 0
"#;
    let cfg = RunConfig::from_toml(text).unwrap();
    assert_eq!(cfg.model.preset, Preset::Toy);
    assert_eq!(cfg.train.schedule, ScheduleConfig::Constant { lr: 1e-3 });
    assert_eq!(cfg.data.normalization, NormPolicy::MinMax);
    assert!(cfg.validate().unwrap().is_empty());
    assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);

    assert!(RunConfig::from_toml(&text.replace("latent_dim = 3", "latent_dim = 3\nbogus = 1")).is_err());
    let mut grid = cfg.clone();
    grid.data.synth.width = 9;
    assert!(grid.validate().is_err());
    let mut batch = cfg.clone();
    batch.train.batch_size = 1;
    assert!(batch.validate().is_err());
    let mut frac = cfg;
    frac.data.train_fraction = 1.0;
    assert!(frac.validate().is_err());
}
