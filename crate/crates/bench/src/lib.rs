//! Workloads shared by the benchmarks in `benches/`.

use physbus_core::platform::Command;
use physbus_core::{BusConfig, ModuleDescriptor, PhysicalVariableSpec, Platform, SlotId};

pub fn descriptor(name: &str, vars: u8, granularity: u8) -> ModuleDescriptor {
    ModuleDescriptor {
        module_name: name.into(),
        variables: (0..vars)
            .map(|i| PhysicalVariableSpec {
                name: format!("v{i}"),
                unit: String::new(),
                min: 0,
                max: 255,
                granularity,
                index: i,
            })
            .collect(),
    }
}

/// A platform with every slot filled, registered and idle at t=100.
pub fn full_bus() -> Platform {
    let config = BusConfig::default();
    let slots = config.slots;
    let mut p = Platform::new(config, 0);
    for s in 1..=slots {
        let descriptor = descriptor("bench", 1 + s % 3, 16);
        p.execute(Command::Plug { slot: SlotId(s), descriptor }, 0).expect("slot is free");
    }
    p.bus_mut().run_until(100);
    p
}
