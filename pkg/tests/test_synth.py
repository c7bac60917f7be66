import numpy as np

from gagstream.synth import SynthConfig, generate_log, generate_sessions


def transition_matrix(sessions, n):
    counts = np.zeros((n, n))
    for _, seq in sessions:
        for a, b in zip(seq, seq[1:]):
            if a < n and b < n:
                counts[a, b] += 1
    rows = counts.sum(axis=1, keepdims=True)
    return np.divide(counts, rows, out=np.zeros_like(counts), where=rows > 0)


class TestSynth:
    def test_deterministic(self):
        assert generate_log(SynthConfig(seed=4)) == generate_log(SynthConfig(seed=4))
        assert generate_log(SynthConfig(seed=4)) != generate_log(SynthConfig(seed=5))

    def test_lengths_and_ids(self):
        cfg = SynthConfig(sessions=300)
        for user, seq in generate_sessions(cfg):
            assert 0 <= user < cfg.users
            assert cfg.min_len <= len(seq) <= cfg.max_len

    def test_timestamps_monotone(self):
        rows = generate_log(SynthConfig(sessions=50))
        ts = [r[2] for r in rows]
        assert ts == sorted(ts)

    def test_drift_changes_transitions(self):
        cfg = SynthConfig(sessions=3000, drift_at=0.5, split_at=0.5, novel_rate=0.0)
        sessions = generate_sessions(cfg)
        q = len(sessions) // 4
        early = transition_matrix(sessions[:q], cfg.items)
        mid = transition_matrix(sessions[q : 2 * q], cfg.items)
        late = transition_matrix(sessions[2 * q : 3 * q], cfg.items)
        within = np.abs(early - mid).sum(axis=1).mean()
        across = np.abs(mid - late).sum(axis=1).mean()
        assert across > 1.5 * within

    def test_no_drift_when_strength_zero(self):
        cfg = SynthConfig(sessions=3000, drift_at=0.5, drift_strength=0.0, novel_rate=0.0)
        sessions = generate_sessions(cfg)
        q = len(sessions) // 4
        mats = [transition_matrix(sessions[k * q : (k + 1) * q], cfg.items) for k in range(3)]
        within = np.abs(mats[0] - mats[1]).sum(axis=1).mean()
        across = np.abs(mats[1] - mats[2]).sum(axis=1).mean()
        assert across < 1.5 * within

    def test_novel_rate(self):
        for seed in range(3):
            cfg = SynthConfig(seed=seed, novel_rate=0.05)
            sessions = generate_sessions(cfg)
            split = int(np.floor(cfg.split_at * cfg.sessions))
            seen = {v for _, seq in sessions[:split] for v in seq}
            post = sessions[split:]
            frac = np.mean([any(v not in seen for v in seq) for _, seq in post])
            assert abs(frac - 0.05) <= 0.01

    def test_no_novel_items_before_split(self):
        cfg = SynthConfig()
        split = int(np.floor(cfg.split_at * cfg.sessions))
        assert all(v < cfg.items for _, seq in generate_sessions(cfg)[:split] for v in seq)
