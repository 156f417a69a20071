use std::sync::OnceLock;

use ovseg_core::synthetic::BOXES;
use ovseg_wasm_demo::Session;

fn session() -> &'static Session {
    static S: OnceLock<Session> = OnceLock::new();
    S.get_or_init(|| Session::new(0.03, 7).unwrap())
}

#[test]
fn buffers_are_sized_per_point() {
    let s = session();
    let n = s.n_points();
    assert!(n > 1000);
    assert_eq!(s.positions().len(), 3 * n);
    assert_eq!(s.colors().len(), 3 * n);
    assert_eq!(s.superpoint_ids().len(), n);
    assert!(s.summary()["superpoints"].as_u64().unwrap() < s.summary()["initial_superpoints"].as_u64().unwrap());
}

#[test]
fn color_prompt_ranks_its_box_first() {
    let s = session();
    let cloud = &s.scene.bundle.cloud;
    for (word, (_, color, _)) in ["red", "green", "blue"].into_iter().zip(BOXES) {
        let v = s.query(word).unwrap();
        assert_eq!(v.colors.len(), 3 * cloud.len());
        let best = v.ranking[0].0 as usize;
        let first = s.artifact.graph.superpoints[best].point_indices[0] as usize;
        assert_eq!(cloud.colors[first], color, "{word}");
    }
}

#[test]
fn instances_label_only_the_box() {
    let s = session();
    let (labels, colors) = s.instances("green", 0.9, 0.09, 10).unwrap();
    assert_eq!(colors.len(), 3 * labels.len());
    let cloud = &s.scene.bundle.cloud;
    let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] >= 0).collect();
    assert!(!members.is_empty());
    assert!(members.iter().all(|&i| labels[i] == 0 && cloud.colors[i] == BOXES[1].1));
}

#[test]
fn bad_inputs_are_errors() {
    let s = session();
    assert!(s.query("").is_err());
    assert!(s.instances("red", 0.5, -1.0, 10).is_err());
    assert!(Session::new(0.0, 1).is_err());
}
