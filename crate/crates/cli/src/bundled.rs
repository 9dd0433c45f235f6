//! Reference configurations compiled into the binary, addressed as
//! `bundled:NAME`.

pub const NAMES: [&str; 5] = [
    "ring12_critical",
    "ring10_kz",
    "square4x4_ordinary",
    "square4x4_surface",
    "ring4_lindblad_oracle",
];

pub fn get(name: &str) -> Option<&'static str> {
    Some(match name {
        "ring12_critical" => include_str!("../configs/ring12_critical.toml"),
        "ring10_kz" => include_str!("../configs/ring10_kz.toml"),
        "square4x4_ordinary" => include_str!("../configs/square4x4_ordinary.toml"),
        "square4x4_surface" => include_str!("../configs/square4x4_surface.toml"),
        "ring4_lindblad_oracle" => include_str!("../configs/ring4_lindblad_oracle.toml"),
        _ => return None,
    })
}
