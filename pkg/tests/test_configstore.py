import os
import tempfile
import textwrap
import unittest

from lcmsec.core.configstore import ConfigStore, SessionConfig, TimingConfig
from lcmsec.core.const import DEFAULT_MTU, DEFAULT_REPLAY_WINDOW
from lcmsec.core.exceptions import ConfigStoreException

NODE_YAML = """\
group: 239.255.76.67:7667
channels:
  - chatter
  - telemetry
certificate: certs/node.crt
private_key: certs/node.key
root_store: roots
reorder: true
timing:
  base_offset_ms: 300
  round_deadline_ms: 1500
"""


class TestConfigStore(unittest.TestCase):
    @classmethod
    def setUpClass(self):
        self.dir = tempfile.TemporaryDirectory()
        self.path = self.write("node.yaml", NODE_YAML)
        self.cs = ConfigStore(self.path)

    @classmethod
    def tearDownClass(self):
        self.dir.cleanup()

    @classmethod
    def write(cls, name, content):
        path = os.path.join(cls.dir.name, name)
        with open(path, "w") as f:
            f.write(textwrap.dedent(content))
        return path

    def test_init(self):
        self.assertRaises(ConfigStoreException, ConfigStore, "")
        self.assertRaises(ConfigStoreException, ConfigStore, os.path.join(self.dir.name, "missing.yaml"))
        self.assertRaises(ConfigStoreException, ConfigStore, self.write("list.yaml", "- a\n- b\n"))
        self.assertRaises(ConfigStoreException, ConfigStore, self.write("broken.yaml", "group: [\n"))

    def test_get_group(self):
        self.assertEqual(self.cs.get_group(), "239.255.76.67:7667")
        self.assertEqual(self.cs.get_channels(), ["chatter", "telemetry"])

    def test_relative_paths(self):
        self.assertEqual(self.cs.get_certificate_path(), os.path.join(self.dir.name, "certs/node.crt"))
        self.assertEqual(self.cs.get_root_store(), os.path.join(self.dir.name, "roots"))

    def test_session_config(self):
        cfg = self.cs.session_config()
        self.assertEqual(cfg.channels, ("chatter", "telemetry"))
        self.assertTrue(cfg.reorder)
        self.assertEqual(cfg.mtu, DEFAULT_MTU)
        self.assertEqual(cfg.replay_window, DEFAULT_REPLAY_WINDOW)
        self.assertEqual(cfg.timing.base_offset_ms, 300)
        self.assertEqual(cfg.timing.round_deadline_ms, 1500)
        self.assertEqual(cfg.timing.retransmit_ms, TimingConfig().retransmit_ms)

    def test_channels_as_string(self):
        cs = ConfigStore(self.write("csv.yaml", "group: 239.1.1.1:5000\nchannels: a, b\n"))
        self.assertEqual(cs.get_channels(), ["a", "b"])

    def test_missing_required(self):
        cs = ConfigStore(self.write("partial.yaml", "group: 239.1.1.1:5000\n"))
        self.assertRaises(ConfigStoreException, cs.session_config)

    def test_invalid_values(self):
        for extra in ["mtu: 100", "replay_window: 100", "ttl: 300", "curve: ed25519", "reorder: maybe",
                      "timing: {unknown_ms: 1}", "timing: {retransmit_ms: 0}", "timing: {epsilon_max_ms: -1}"]:
            with self.subTest(extra=extra):
                # later keys win in yaml, so the override goes after the base without timing
                cs = ConfigStore(self.write("invalid.yaml", NODE_YAML.split("timing:")[0] + extra + "\n"))
                self.assertRaises(ConfigStoreException, cs.session_config)


class TestSessionConfig(unittest.TestCase):

    def test_group_must_be_multicast(self):
        self.assertRaises(ConfigStoreException, SessionConfig, group="10.0.0.1:7667")
        self.assertRaises(ConfigStoreException, SessionConfig, group="239.255.76.67")
        SessionConfig(group="239.255.76.67:7667")

    def test_channel_names(self):
        for bad in [("",), ("a:b",), ("nul\x00",), ("dup", "dup"), ("x" * 256,)]:
            with self.subTest(channels=bad):
                self.assertRaises(ConfigStoreException, SessionConfig, group="239.1.1.1:5000", channels=bad)

    def test_timing_order(self):
        self.assertRaises(ConfigStoreException, TimingConfig, response_delay_min_ms=200, response_delay_max_ms=100)
        self.assertRaises(ConfigStoreException, TimingConfig.from_dict, [1, 2])
        self.assertEqual(TimingConfig.from_dict(None), TimingConfig())
