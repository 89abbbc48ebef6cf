"""Regenerate the modern/ancient city tables for the spatial-join scenario."""
import numpy as np
import pandas as pd


def build():
    rng = np.random.default_rng(11)
    ancient = pd.DataFrame({
        "site": [f"site_{i:03d}" for i in range(150)],
        "lat": np.round(rng.uniform(36, 50, 150), 4),
        "lon": np.round(rng.uniform(-8, 30, 150), 4),
    })
    near = rng.choice(150, 40, replace=False)
    lat = np.concatenate([ancient.lat.to_numpy()[near] + rng.normal(0, 0.06, 40),
                          rng.uniform(36, 50, 260)])
    lon = np.concatenate([ancient.lon.to_numpy()[near] + rng.normal(0, 0.06, 40),
                          rng.uniform(-8, 30, 260)])
    modern = pd.DataFrame({
        "city": [f"city_{i:03d}" for i in range(300)],
        "latitude": np.round(lat, 4),
        "longitude": np.round(lon, 4),
        "population": rng.integers(20_000, 2_000_000, 300),
    })
    modern.to_csv("modern_cities.csv", index=False)
    ancient.to_csv("roman_sites.csv", index=False)


if __name__ == "__main__":
    build()
