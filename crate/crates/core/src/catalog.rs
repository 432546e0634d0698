//! Scenario files compiled into the library, addressable as `builtin:<name>`.

const BUILTINS: &[(&str, &str)] = &[
    ("example1", include_str!("../scenarios/example1.toml")),
    ("example2", include_str!("../scenarios/example2.toml")),
    ("example3", include_str!("../scenarios/example3.toml")),
    ("annulus", include_str!("../scenarios/annulus.toml")),
    ("scenario_a_outside", include_str!("../scenarios/scenario_a_outside.toml")),
    ("scenario_a_inside", include_str!("../scenarios/scenario_a_inside.toml")),
    ("scenario_b_case_a", include_str!("../scenarios/scenario_b_case_a.toml")),
    ("scenario_b_case_b", include_str!("../scenarios/scenario_b_case_b.toml")),
];

pub fn names() -> impl Iterator<Item = &'static str> {
    BUILTINS.iter().map(|(n, _)| *n)
}

pub fn get(name: &str) -> Option<&'static str> {
    BUILTINS.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}
