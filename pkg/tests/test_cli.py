from click.testing import CliRunner

from scene4d.cli import main


def test_script_render_report_flow(tmp_path):
    runner = CliRunner()
    script = tmp_path / "s.script"
    script.write_text("The ball moves to the right\nMake the ball lime\n")
    out = tmp_path / "run"

    result = runner.invoke(main, [
        "script", str(script), "--out", str(out), "--seed", "4",
        "--distill-steps", "60",
    ])
    assert result.exit_code == 0, result.output
    assert "final scene hash" in result.output
    assert (out / "session.json").exists()
    assert (out / "renders" / "final" / "frame_000.pfm").exists()

    result = runner.invoke(main, [
        "edit", str(out), "Delete the ball", "--no-render",
    ])
    assert result.exit_code == 0, result.output
    assert "selected" in result.output

    result = runner.invoke(main, [
        "render", str(out), "--camera", "orbit", "--frame", "2",
        "--az", "45",
    ])
    assert result.exit_code == 0, result.output
    assert (out / "renders" / "adhoc" / "frame_002.png").exists()

    result = runner.invoke(main, ["report", str(out)])
    assert result.exit_code == 0, result.output
    assert list((out / "report").glob("*.png"))


def test_gen_command(tmp_path):
    runner = CliRunner()
    out = tmp_path / "g"
    result = runner.invoke(main, [
        "gen", "The cube moves slowly to the left", "--out", str(out),
        "--seed", "2", "--distill-steps", "50", "--no-render",
        "--eta", "10", "--inner-iters", "3",
    ])
    assert result.exit_code == 0, result.output
    assert "guidance in-box mass" in result.output


def test_error_reporting(tmp_path):
    runner = CliRunner()
    out = tmp_path / "e"
    out.mkdir()
    (out / "session.json").write_text("{}")
    result = runner.invoke(main, ["edit", str(out), "Delete the ball"])
    assert result.exit_code == 1
    assert "engine-service" in result.output
