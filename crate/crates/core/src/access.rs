//! Instrumented access to the victim student model.
//!
//! The attacker only ever holds a [`StudentOracle`]. Before
//! [`StudentOracle::begin_evaluation`] is called, queries fail with
//! [`Error::AccessViolation`] unless the oracle was opened with
//! [`QueryPolicy::Permitted`] (the direct baseline).

use std::panic::Location;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Classifier;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryPolicy {
    /// No queries before evaluation.
    Forbidden,
    /// Pre-evaluation queries allowed and counted.
    Permitted,
}

#[derive(Debug)]
pub struct StudentOracle {
    model: Classifier,
    policy: QueryPolicy,
    evaluating: AtomicBool,
    pre_eval: AtomicUsize,
    eval: AtomicUsize,
    violations: Mutex<Vec<String>>,
}

impl StudentOracle {
    pub fn new(model: Classifier, policy: QueryPolicy) -> Self {
        Self {
            model,
            policy,
            evaluating: AtomicBool::new(false),
            pre_eval: AtomicUsize::new(0),
            eval: AtomicUsize::new(0),
            violations: Mutex::new(Vec::new()),
        }
    }

    pub fn policy(&self) -> QueryPolicy {
        self.policy
    }

    pub fn num_classes(&self) -> usize {
        self.model.num_classes()
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.model.input_shape()
    }

    /// Confidence vectors for `x`. Each row counts as one query.
    #[track_caller]
    pub fn query(&self, x: &Array4<f32>) -> Result<Array2<f32>> {
        let n = x.dim().0;
        if self.evaluating.load(Ordering::SeqCst) {
            self.eval.fetch_add(n, Ordering::SeqCst);
        } else {
            if self.policy == QueryPolicy::Forbidden {
                let site = Location::caller().to_string();
                self.violations.lock().expect("violation log").push(site.clone());
                return Err(Error::AccessViolation { site });
            }
            self.pre_eval.fetch_add(n, Ordering::SeqCst);
        }
        self.model.predict(x)
    }

    /// Switch to the evaluation phase; later queries are always allowed.
    pub fn begin_evaluation(&self) {
        self.evaluating.store(true, Ordering::SeqCst);
    }

    pub fn is_evaluating(&self) -> bool {
        self.evaluating.load(Ordering::SeqCst)
    }

    pub fn pre_evaluation_queries(&self) -> usize {
        self.pre_eval.load(Ordering::SeqCst)
    }

    pub fn evaluation_queries(&self) -> usize {
        self.eval.load(Ordering::SeqCst)
    }

    /// Call sites of every rejected query.
    pub fn violations(&self) -> Vec<String> {
        self.violations.lock().expect("violation log").clone()
    }
}
