use ovd_cli::checkpoint::Checkpoint;
use ovd_cli::coco::{from_coco, load_annotations, save_annotations, CocoFile};
use ovd_cli::commands::{load_model, model_to_checkpoint};
use ovd_cli::config::RunConfig;
use ovd_core::model::{Model, ModelConfig};
use ovd_core::scene::{generate_scenes, Partition, SceneSpec};

fn parse(json: &str) -> anyhow::Result<ovd_cli::coco::Loaded> {
    let file: CocoFile = serde_json::from_str(json).unwrap();
    from_coco(file)
}

#[test]
fn one_image_one_box() {
    let l = parse(
        r#"{"images":[{"id":3,"file_name":"a.png","width":10,"height":10}],
            "annotations":[{"id":1,"image_id":3,"category_id":7,"bbox":[1,2,3,4]}],
            "categories":[{"id":7,"name":"Red  Ring"}]}"#,
    )
    .unwrap();
    assert_eq!(l.records.len(), 1);
    assert_eq!(l.vocabulary.names(), ["red ring"]);
    assert_eq!(l.records[0].objects[0].bbox, [1.0, 2.0, 3.0, 4.0]);
    assert_eq!(l.clipped, 0);
}

#[test]
fn box_past_the_edge_is_clipped_and_counted() {
    let l = parse(
        r#"{"images":[{"id":0,"file_name":"a.png","width":10,"height":10}],
            "annotations":[{"id":1,"image_id":0,"category_id":1,"bbox":[8,-2,5,5]}],
            "categories":[{"id":1,"name":"x"}]}"#,
    )
    .unwrap();
    assert_eq!(l.records[0].objects[0].bbox, [8.0, 0.0, 2.0, 3.0]);
    assert_eq!(l.clipped, 1);
}

#[test]
fn undefined_category_is_named() {
    let e = parse(
        r#"{"images":[{"id":0,"file_name":"a.png","width":10,"height":10}],
            "annotations":[{"id":5,"image_id":0,"category_id":42,"bbox":[1,1,2,2]}],
            "categories":[{"id":1,"name":"x"}]}"#,
    )
    .unwrap_err();
    let msg = format!("{e:#}");
    assert!(msg.contains("category id 42"), "{msg}");
    assert!(msg.contains("annotations[0]"), "{msg}");
}

#[test]
fn box_outside_the_image_is_malformed() {
    let e = parse(
        r#"{"images":[{"id":0,"file_name":"a.png","width":10,"height":10}],
            "annotations":[{"id":5,"image_id":0,"category_id":1,"bbox":[12,1,2,2]}],
            "categories":[{"id":1,"name":"x"}]}"#,
    )
    .unwrap_err();
    assert!(format!("{e:#}").contains("malformed box"));
}

#[test]
fn records_come_out_ordered() {
    let l = parse(
        r#"{"images":[{"id":2,"file_name":"b.png","width":10,"height":10},{"id":1,"file_name":"a.png","width":10,"height":10}],
            "annotations":[{"id":9,"image_id":1,"category_id":1,"bbox":[1,1,2,2]},
                           {"id":4,"image_id":1,"category_id":1,"bbox":[3,3,2,2]},
                           {"id":1,"image_id":2,"category_id":1,"bbox":[5,5,2,2]}],
            "categories":[{"id":1,"name":"x"}]}"#,
    )
    .unwrap();
    assert_eq!(l.records[0].image_id, 1);
    assert_eq!(l.records[0].objects[0].bbox[0], 3.0);
}

#[test]
fn generated_records_round_trip() {
    let spec = SceneSpec { seed: 4, novel: vec!["red ring".into()], ..SceneSpec::default() };
    let scenes = generate_scenes(&spec, Partition::Eval, 6).unwrap();
    let records: Vec<_> = scenes.into_iter().map(|s| s.record).collect();
    let vocab = spec.vocabulary().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.json");
    save_annotations(&p, &records, &vocab).unwrap();
    let back = load_annotations(&p).unwrap();
    assert_eq!(back.records, records);
    assert_eq!(back.vocabulary.names(), vocab.names());
}

#[test]
fn checkpoint_restores_the_model() {
    let cfg = ModelConfig { channels: 8, text_dim: 8, attn_dim: 4, hidden: 8, decoder_layers: 1, queries: 4, ..ModelConfig::default() };
    let model = Model::new(cfg, 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.ckpt");
    model_to_checkpoint(&model, &RunConfig::default()).save(&p).unwrap();
    let back = load_model(&p).unwrap();
    assert_eq!(back.config, model.config);
    assert_eq!(back.named_params(), model.named_params());
    let ck = Checkpoint::load(&p).unwrap();
    assert_eq!(ck.tensors.len(), model.params.len());
}
