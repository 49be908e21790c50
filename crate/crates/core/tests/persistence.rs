use cellseg::checkpoint::{Checkpoint, MAGIC, TEXT_TENSOR};
use cellseg::encoders::PromptSet;
use cellseg::ppd::Stage;
use cellseg::selfcheck::tiny_model_config;
use cellseg::{Error, Model};

fn model(seed: u64) -> Model<f32> {
    Model::new(tiny_model_config(), &PromptSet::builtin(), seed).unwrap()
}

fn format_message(bytes: &[u8]) -> String {
    match Checkpoint::from_bytes(bytes) {
        Err(Error::Format(msg)) => msg,
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn save_load_save_is_bitwise_identical() {
    let dir = tempfile::tempdir().unwrap();
    let m = model(3);
    let a = dir.path().join("a.ckpt");
    let b = dir.path().join("b.ckpt");
    Checkpoint::from_model(&m).save(&a).unwrap();
    let restored = Checkpoint::load(&a).unwrap().to_model().unwrap();
    Checkpoint::from_model(&restored).save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(restored.params(), m.params());
    assert_eq!(restored.text_embeddings(), m.text_embeddings());
}

#[test]
fn table_contains_text_embeddings_and_sorted_names() {
    let ck = Checkpoint::from_model(&model(0));
    assert!(ck.tensors.contains_key(TEXT_TENSOR));
    let bytes = ck.to_bytes();
    assert_eq!(&bytes[..4], MAGIC);
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
}

#[test]
fn corrupted_magic_is_rejected() {
    let mut bytes = Checkpoint::from_model(&model(0)).to_bytes();
    bytes[1] = b'X';
    assert!(format_message(&bytes).contains("magic"));
}

#[test]
fn truncation_names_the_tensor_being_read() {
    let ck = Checkpoint::from_model(&model(0));
    let bytes = ck.to_bytes();
    let last = ck.tensors.keys().last().unwrap().clone();
    let msg = format_message(&bytes[..bytes.len() - 2]);
    assert!(msg.contains(&format!("'{last}'")), "{msg}");
    // Every shorter prefix fails too, and never panics.
    for cut in (0..bytes.len()).step_by(97) {
        assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "prefix {cut} accepted");
    }
}

#[test]
fn missing_tensor_is_named() {
    let mut ck = Checkpoint::from_model(&model(0));
    let name = ck.tensors.keys().find(|k| k.starts_with("head.offset")).cloned().unwrap();
    ck.tensors.remove(&name);
    let msg = format_message(&ck.to_bytes());
    assert!(msg.contains(&format!("missing tensor '{name}'")), "{msg}");
}

#[test]
fn trailing_bytes_are_rejected() {
    let mut bytes = Checkpoint::from_model(&model(0)).to_bytes();
    bytes.push(0);
    assert!(format_message(&bytes).contains("trailing"));
}

#[test]
fn wrong_shape_is_rejected_on_reassembly() {
    let mut ck = Checkpoint::from_model(&model(0));
    let name = ck.tensors.keys().find(|k| k.ends_with(".bias")).unwrap().clone();
    let t = ck.tensors[&name].clone();
    ck.tensors.insert(name, t.reshape(&[1, t.numel()]).unwrap());
    let parsed = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
    assert!(matches!(parsed.to_model(), Err(Error::Format(_))));
}

#[test]
fn disabled_stage_has_no_tensors() {
    let mut cfg = tiny_model_config();
    cfg.ablation.decoder.disabled_stages = vec![Stage::QT];
    let m = Model::<f32>::new(cfg.clone(), &PromptSet::builtin(), 0).unwrap();
    let ck = Checkpoint::from_model(&m);
    assert!(ck.tensors.keys().all(|k| !k.starts_with("ppd.qT.")));
    assert!(ck.tensors.keys().any(|k| k.starts_with("ppd.qt.")));
    assert!(m.parameter_count() < model(0).parameter_count());
    let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
    assert_eq!(back.config, cfg);
}
