use serde::{Deserialize, Serialize};

use super::RfqRequest;

/// Static description of a homogeneous partition of a machine.
///
/// `None` for a descriptive term means the administrator did not declare it;
/// a request naming that term then cannot be satisfied.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ResourceProfile {
    #[serde(default)]
    pub operating_system: Option<String>,
    #[serde(default)]
    pub os_version: Option<String>,
    #[serde(default)]
    pub architecture: Option<String>,
    #[serde(default)]
    pub cpu_speed: Option<f64>,
    #[serde(default)]
    pub ram_per_core: u64,
    #[serde(default)]
    pub node_disk_space: u64,
    #[serde(default)]
    pub total_disk_space: u64,
    #[serde(default)]
    pub inter_node_bandwidth: u64,
    pub node_count: u64,
    pub node_cores: u64,
}

impl ResourceProfile {
    pub fn total_cores(&self) -> u64 {
        self.node_count * self.node_cores
    }

    /// A profile with generous capacities, used where only cores matter.
    pub fn generic(node_count: u64, node_cores: u64) -> Self {
        ResourceProfile {
            operating_system: Some("Linux".into()),
            os_version: None,
            architecture: Some("x86_64".into()),
            cpu_speed: Some(2.6),
            ram_per_core: 4096,
            node_disk_space: 500_000,
            total_disk_space: 500_000 * node_count,
            inter_node_bandwidth: 40_000,
            node_count,
            node_cores,
        }
    }
}

/// True iff every term present in the request is satisfied by the profile.
pub fn match_static(profile: &ResourceProfile, request: &RfqRequest) -> bool {
    fn same(want: &Option<String>, have: &Option<String>) -> bool {
        match want {
            None => true,
            Some(w) => have.as_deref() == Some(w.as_str()),
        }
    }
    fn at_least(want: Option<u64>, have: u64) -> bool {
        want.is_none_or(|w| have >= w)
    }

    if !same(&request.operating_system, &profile.operating_system)
        || !same(&request.os_version, &profile.os_version)
        || !same(&request.architecture, &profile.architecture)
    {
        return false;
    }
    if let Some(speed) = request.cpu_speed {
        match profile.cpu_speed {
            Some(have) if have >= speed => {}
            _ => return false,
        }
    }
    if !at_least(request.ram_per_core, profile.ram_per_core)
        || !at_least(request.inter_node_bandwidth, profile.inter_node_bandwidth)
        || !at_least(request.node_disk_space, profile.node_disk_space)
        || !at_least(request.total_disk_space, profile.total_disk_space)
    {
        return false;
    }
    match (request.total_cores, request.node_count, request.node_cores) {
        (Some(total), _, _) => total as u64 <= profile.total_cores(),
        // No splitting of a requested node across physical nodes.
        (None, Some(count), Some(cores)) => {
            count as u64 <= profile.node_count && cores as u64 <= profile.node_cores
        }
        _ => false,
    }
}
