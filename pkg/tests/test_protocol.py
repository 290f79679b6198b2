import json
import socket
import threading

import pytest

from lanedrop.env import BottleneckEnv, EpisodeConfig
from lanedrop.protocol import EnvClient, EnvServer, LineReader, send_line


@pytest.fixture()
def server():
    cfg = EpisodeConfig(penetration=0.10, reroute=False, warmup=100.0,
                        horizon=50.0, inflow=2400.0)
    srv = EnvServer(("127.0.0.1", 0), cfg)
    thread = threading.Thread(target=srv.serve_forever, daemon=True)
    thread.start()
    yield srv
    srv.shutdown()
    srv.server_close()


class TestProtocol:
    def test_handshake_and_reset(self, server):
        client = EnvClient("127.0.0.1", server.port)
        assert client.hello["version"] == 1
        assert client.hello["obs_dim"] == server.cfg.observation_size()
        reply = client.reset(seed=3)
        assert isinstance(reply["obs"], dict)
        for vec in reply["obs"].values():
            assert len(vec) == server.cfg.observation_size()
        client.close()

    def test_step_empty_actions_on_empty_network(self):
        cfg = EpisodeConfig(penetration=0.1, reroute=False, warmup=10.0,
                            horizon=20.0, inflow=0.0)
        srv = EnvServer(("127.0.0.1", 0), cfg)
        t = threading.Thread(target=srv.serve_forever, daemon=True)
        t.start()
        try:
            client = EnvClient("127.0.0.1", srv.port)
            client.reset(seed=0)
            reply = client.step({})
            assert reply["reward"] == 0.0
            client.close()
        finally:
            srv.shutdown()
            srv.server_close()

    def test_malformed_message_keeps_session(self, server):
        sock = socket.create_connection(("127.0.0.1", server.port))
        reader = LineReader(sock)
        reader.readline()  # handshake
        sock.sendall(b"this is not json\n")
        reply = json.loads(reader.readline())
        assert "error" in reply
        send_line(sock, {"cmd": "reset", "seed": 1})
        reply = json.loads(reader.readline())
        assert "obs" in reply
        sock.close()

    def test_unknown_command_error(self, server):
        client = EnvClient("127.0.0.1", server.port)
        with pytest.raises(RuntimeError):
            client._call({"cmd": "fly"})
        client.close()

    def test_step_before_reset_is_error(self, server):
        client = EnvClient("127.0.0.1", server.port)
        with pytest.raises(RuntimeError):
            client.step({})
        client.close()

    def test_wire_matches_in_process_exactly(self, server):
        # same seed, same config: the remote trajectory must reproduce the
        # local one bit for bit (JSON floats round-trip exactly)
        for seed in (1, 2, 3):
            env = BottleneckEnv(server.cfg)
            local_obs = env.reset(seed=seed)
            client = EnvClient("127.0.0.1", server.port)
            remote = client.reset(seed=seed)
            assert remote["obs"] == local_obs
            obs = local_obs
            while True:
                actions = {k: 0.25 for k in obs}
                l_obs, l_rew, l_dones, l_info = env.step(actions)
                r = client.step(actions)
                l_obs.pop("__all__", None)
                assert r["obs"] == {k: v for k, v in l_obs.items()}
                assert r["reward"] == l_rew
                assert r["dones"] == {str(k): v for k, v in l_dones.items()}
                if l_dones["__all__"]:
                    break
                obs = {k: v for k, v in l_obs.items() if not l_dones.get(k)}
            client.close()

    def test_sessions_are_independent(self, server):
        a = EnvClient("127.0.0.1", server.port)
        b = EnvClient("127.0.0.1", server.port)
        ra = a.reset(seed=7)
        rb = b.reset(seed=7)
        assert ra["obs"] == rb["obs"]
        a.step({k: 1.0 for k in ra["obs"]})
        rb2 = b.step({k: 0.0 for k in rb["obs"]})
        assert "obs" in rb2
        a.close()
        b.close()
