use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    RobotNavigation,
    FoodCollection,
    PredatorPrey,
    /// Two agents on a line, horizon 4, two Gaussian reward bumps in the
    /// joint position space. Small enough to check reward proportionality.
    BimodalToy,
}

impl Scenario {
    pub fn pos_dim(self) -> usize {
        match self {
            Scenario::BimodalToy => 1,
            _ => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scenario::RobotNavigation => "robot_navigation",
            Scenario::FoodCollection => "food_collection",
            Scenario::PredatorPrey => "predator_prey",
            Scenario::BimodalToy => "bimodal_toy",
        }
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}
