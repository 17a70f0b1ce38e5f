use serde::{Deserialize, Serialize};

/// Total predictive uncertainty split into data and knowledge parts (nats),
/// plus the confidence (max predictive probability).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub total: f64,
    pub data: f64,
    pub knowledge: f64,
    pub confidence: f64,
}
