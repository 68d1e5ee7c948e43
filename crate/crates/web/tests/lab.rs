use serde_json::Value;
use stagecap_web::Lab;

#[test]
fn scenes_masks_and_traces() {
    let mut lab = Lab::new(3, 120).unwrap();
    assert_eq!(lab.held_out_len(), 12);
    let scene: Value = serde_json::from_str(&lab.scene_json(0).unwrap()).unwrap();
    assert!(!scene["attributes"].as_array().unwrap().is_empty());
    let caption = scene["captions"][0].as_str().unwrap().to_string();

    let masked: Value = serde_json::from_str(&lab.mask_json(&caption, 0.5, true, 9).unwrap()).unwrap();
    let words = masked.as_array().unwrap();
    let len = caption.split_whitespace().count();
    assert_eq!(words.len(), len);
    let hidden = words.iter().filter(|w| w["masked"] == true).count();
    assert_eq!(hidden, (len + 1) / 2);
    assert!(words.iter().all(|w| w["masked"] == false || w["word"] == "[MASK]"));
    assert_eq!(words.iter().filter(|w| w["noised"] == true).count(), usize::from(hidden < len));
    assert!(lab.mask_json(&caption, 0.0, false, 1).is_err());

    assert!(lab.trace_json(0, 0, "0.4,0.6,0.8,1.0", 1).is_err());
    let mut seen = Vec::new();
    let trained: Value = serde_json::from_str(&lab.train_json(2, "0.4,0.6,0.8,1.0", |e, l| seen.push((e, l))).unwrap()).unwrap();
    assert_eq!(seen.len(), 2);
    assert_eq!(trained["losses"].as_array().unwrap().len(), 2);
    let trace: Value = serde_json::from_str(&lab.trace_json(1, 0, "0.4,0.6,0.8,1.0", 2).unwrap()).unwrap();
    let stages = trace.as_array().unwrap();
    assert_eq!(stages.len(), 7);
    assert_eq!(stages[6]["round"], 2);
    assert!(lab.trace_json(99, 0, "0.4,1", 1).is_err());
}
