use msa_core::objectives::{supcon_loss, ContrastiveBatch};
use msa_core::rng::{normal_vec, stream};
use msa_core::tensor::Tensor;
use msa_core::Error;
use rand::Rng;

/// Direct enumeration of the double sum on naively normalised rows,
/// averaged over anchors that have at least one positive.
fn brute_force(raw: &[Vec<f64>], labels: &[usize], tau: f64) -> Option<f64> {
    let z: Vec<Vec<f64>> = raw
        .iter()
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter().map(|v| v / n).collect()
        })
        .collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let n = z.len();
    let mut total = 0.0;
    let mut anchors = 0;
    for i in 0..n {
        let positives: Vec<usize> = (0..n).filter(|&p| p != i && labels[p] == labels[i]).collect();
        if positives.is_empty() {
            continue;
        }
        let denom: f64 = (0..n).filter(|&a| a != i).map(|a| (dot(&z[i], &z[a]) / tau).exp()).sum();
        let mut term = 0.0;
        for &p in &positives {
            term += ((dot(&z[i], &z[p]) / tau).exp() / denom).ln();
        }
        total += -term / positives.len() as f64;
        anchors += 1;
    }
    (anchors > 0).then(|| total / anchors as f64)
}

#[test]
fn matches_brute_force_on_random_batches() {
    let mut rng = stream(2024, &[]);
    let mut checked = 0;
    while checked < 50 {
        let n = rng.random_range(2..=8);
        let k = rng.random_range(1..=3);
        let d = rng.random_range(2..=6);
        let tau = [0.07, 0.1, 0.5, 1.0][rng.random_range(0..4)];
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let raw: Vec<Vec<f64>> = (0..n).map(|_| normal_vec(&mut rng, d, 1.0)).collect();
        let t = Tensor::new(&[n, d], raw.concat()).unwrap();
        let got = supcon_loss(&ContrastiveBatch::new(&t, labels.clone(), tau).unwrap());
        match brute_force(&raw, &labels, tau) {
            Some(expect) => {
                let got = got.unwrap().item().unwrap();
                assert!((got - expect).abs() < 1e-10, "{got} vs {expect}");
                checked += 1;
            }
            None => assert!(matches!(got, Err(Error::DegenerateBatch))),
        }
    }
}

#[test]
fn fixed_four_sample_batch() {
    let raw = vec![
        vec![0.6, 0.8, 0.0],
        vec![0.0, 0.6, 0.8],
        vec![0.8, 0.0, -0.6],
        vec![-0.48, 0.6, 0.64],
    ];
    let labels = vec![0, 0, 1, 1];
    let t = Tensor::new(&[4, 3], raw.concat()).unwrap();
    let got = supcon_loss(&ContrastiveBatch::new(&t, labels.clone(), 0.07).unwrap()).unwrap();
    let expect = brute_force(&raw, &labels, 0.07).unwrap();
    assert!((got.item().unwrap() - expect).abs() < 1e-10);
}

#[test]
fn same_label_pair_is_exactly_zero() {
    let t = Tensor::new(&[2, 3], normal_vec(&mut stream(5, &[]), 6, 1.0)).unwrap();
    let loss = supcon_loss(&ContrastiveBatch::new(&t, vec![2, 2], 0.07).unwrap()).unwrap();
    assert_eq!(loss.item().unwrap(), 0.0);
}

#[test]
fn unique_labels_are_degenerate() {
    let t = Tensor::new(&[3, 4], normal_vec(&mut stream(6, &[]), 12, 1.0)).unwrap();
    let res = supcon_loss(&ContrastiveBatch::new(&t, vec![0, 1, 2], 0.07).unwrap());
    assert!(matches!(res, Err(Error::DegenerateBatch)));
}
