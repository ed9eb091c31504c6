use serde::{Deserialize, Serialize};

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl Metrics {
    pub fn from_predictions(preds: &[usize], labels: &[usize], num_classes: usize) -> Metrics {
        let mut confusion = vec![vec![0; num_classes]; num_classes];
        for (&p, &l) in preds.iter().zip(labels) {
            confusion[l][p] += 1;
        }
        let mut m = Metrics { accuracy: 0.0, confusion };
        m.accuracy = m.correct() as f64 / m.total().max(1) as f64;
        m
    }

    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }

    pub fn correct(&self) -> usize {
        (0..self.confusion.len()).map(|i| self.confusion[i][i]).sum()
    }

    pub fn class_totals(&self) -> Vec<usize> {
        self.confusion.iter().map(|r| r.iter().sum()).collect()
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean distance between class centroids divided by the mean distance of
/// samples to their own centroid. Larger means better separated.
pub fn centroid_separation(features: &[Vec<f32>], labels: &[usize]) -> f64 {
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let dim = features.first().map_or(0, Vec::len);
    let mut centroids = vec![vec![0.0f64; dim]; k];
    let mut counts = vec![0usize; k];
    for (f, &l) in features.iter().zip(labels) {
        counts[l] += 1;
        for (c, &v) in centroids[l].iter_mut().zip(f) {
            *c += v as f64;
        }
    }
    for (c, &n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= n.max(1) as f64);
    }
    let present: Vec<usize> = (0..k).filter(|&c| counts[c] > 0).collect();
    let (mut inter, mut pairs) = (0.0, 0usize);
    for (i, &a) in present.iter().enumerate() {
        for &b in &present[i + 1..] {
            inter += dist(&centroids[a], &centroids[b]);
            pairs += 1;
        }
    }
    let intra: f64 = features
        .iter()
        .zip(labels)
        .map(|(f, &l)| dist(&f.iter().map(|&v| v as f64).collect::<Vec<_>>(), &centroids[l]))
        .sum::<f64>()
        / features.len().max(1) as f64;
    (inter / pairs.max(1) as f64) / intra.max(f64::MIN_POSITIVE)
}
