//! Labeled Gaussian-cluster corpora for smoke runs and tests.

use rand::Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Normal};

use crate::mechanisms::rng_for;
use crate::retrieval::{ingest_query, ingest_record, DemoRecord, QueryRecord, RawRecord};

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSpec {
    pub dimension: usize,
    pub classes: Vec<String>,
    /// Relative class frequencies, one per class.
    pub weights: Vec<f64>,
    /// Per-coordinate spread around each unit-norm class center.
    pub spread: f64,
}

impl ClusterSpec {
    pub fn balanced(classes: &[&str], dimension: usize, spread: f64) -> Self {
        Self {
            dimension,
            classes: classes.iter().map(|c| c.to_string()).collect(),
            weights: vec![1.0; classes.len()],
            spread,
        }
    }
}

pub struct ClusterSampler {
    spec: ClusterSpec,
    centers: Vec<Vec<f64>>,
    class_dist: WeightedIndex<f64>,
    noise: Normal<f64>,
}

impl ClusterSampler {
    /// Draws class centers from `seed`.
    pub fn new(spec: ClusterSpec, seed: u64) -> Self {
        assert_eq!(spec.classes.len(), spec.weights.len(), "one weight per class");
        let mut rng = rng_for(seed);
        let unit = Normal::new(0.0, 1.0).expect("valid normal");
        let centers = (0..spec.classes.len())
            .map(|_| {
                let v: Vec<f64> = (0..spec.dimension).map(|_| unit.sample(&mut rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / norm).collect()
            })
            .collect();
        let class_dist = WeightedIndex::new(&spec.weights).expect("positive weights");
        let noise = Normal::new(0.0, spec.spread).expect("valid spread");
        Self { spec, centers, class_dist, noise }
    }

    pub fn classes(&self) -> &[String] {
        &self.spec.classes
    }

    fn point<R: Rng>(&self, class: usize, rng: &mut R) -> Vec<f64> {
        self.centers[class].iter().map(|c| c + self.noise.sample(rng)).collect()
    }

    /// `n` raw records with ids `first_id..first_id + n`.
    pub fn raw_records(&self, n: usize, first_id: u64, seed: u64) -> Vec<RawRecord> {
        let mut rng = rng_for(seed);
        (0..n as u64)
            .map(|i| {
                let class = self.class_dist.sample(&mut rng);
                let id = first_id + i;
                RawRecord {
                    id,
                    content: format!("document {id} about {}", self.spec.classes[class]),
                    question: None,
                    answer: Some(self.spec.classes[class].clone()),
                    embedding: self.point(class, &mut rng),
                }
            })
            .collect()
    }

    pub fn demos(&self, n: usize, first_id: u64, seed: u64) -> Vec<DemoRecord> {
        self.raw_records(n, first_id, seed)
            .into_iter()
            .map(|r| ingest_record(r, self.spec.dimension).expect("synthetic records are well formed"))
            .collect()
    }

    /// Labeled queries whose text does not reveal the class.
    pub fn queries(&self, n: usize, first_id: u64, seed: u64) -> Vec<QueryRecord> {
        self.raw_records(n, first_id, seed)
            .into_iter()
            .map(|mut r| {
                r.content = format!("query {}", r.id);
                ingest_query(r, self.spec.dimension).expect("synthetic queries are well formed")
            })
            .collect()
    }
}
