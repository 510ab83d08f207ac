"""LMT results browser (Streamlit application).

Lists the experiment runs stored under the output directory and shows, for
the selected run, its status, resolved configuration, results table and
training histories. Commands can be started from the sidebar; they run
in-process through the same entry point as the command line.

Usage:
    Run via ``streamlit run app.py`` or use ``run.py`` for headless mode.
"""

import os

import pandas as pd
import streamlit as st
from dotenv import load_dotenv, dotenv_values

from src.cli import main as run_cli
from src.run_manager import RunManager
from src.utils import logger

# Load environment variables
load_dotenv()

run_manager = RunManager()

LAUNCHABLE = ("generate-data", "train", "probe", "sweep-alpha")
STATUS_ICONS = {"created": "⚪", "running": "🔵", "completed": "🟢", "failed": "🔴"}

st.set_page_config(
    page_title="LMT Results",
    page_icon="📈",
    layout="wide"
)

if 'current_run_id' not in st.session_state:
    st.session_state.current_run_id = None


def launch_command(command, overrides_text):
    """Run a CLI command with one ``key=value`` override per line.

    Returns:
        int: The command's exit code.
    """
    argv = [command, "--set", f"output_dir={run_manager.runs_dir}"]
    for line in overrides_text.splitlines():
        if line.strip():
            argv += ["--set", line.strip()]
    logger.info(f"Launching from UI: {' '.join(argv)}")
    return run_cli(argv)


def render_run(run_id):
    """Show one run's state, configuration and tables."""
    state = run_manager.load_run(run_id)
    if not state:
        st.warning("Run not found")
        return

    st.header(f"{STATUS_ICONS.get(state['status'], '')} {state['name']}")
    st.caption(f"{state['id']} · created {state['created_at']} · status **{state['status']}**")
    if state.get("error"):
        st.error(state["error"])

    results = run_manager.read_table(run_id, "results")
    if results is not None:
        st.subheader("Results")
        st.dataframe(results, use_container_width=True, hide_index=True)

    histories = [key for key in state["files"] if key.startswith("history_")]
    for key in histories:
        st.subheader(key.replace("history_", "History: "))
        st.dataframe(run_manager.read_table(run_id, key), use_container_width=True, hide_index=True)

    config_path = run_manager.get_file(run_id, "config")
    if config_path and os.path.exists(config_path):
        with st.expander("Resolved configuration"):
            config = pd.DataFrame(list(dotenv_values(config_path).items()), columns=["key", "value"])
            st.dataframe(config, use_container_width=True, hide_index=True)

    with st.expander("Files"):
        st.json(state["files"])


def main():
    """Render the results browser.

    - Sidebar: command launcher and the run list (select / delete).
    - Main area: the selected run.
    """
    st.title("📈 LMT Experiment Runs")

    with st.sidebar:
        with st.expander("▶️ Run a command", expanded=False):
            command = st.selectbox("Command", LAUNCHABLE)
            overrides = st.text_area("Overrides (key=value per line)", value="n_patients=200\nepochs=2\nseeds=1")
            if st.button("Start", use_container_width=True):
                with st.spinner(f"Running {command}..."):
                    code = launch_command(command, overrides)
                if code == 0:
                    st.success(f"{command} finished")
                else:
                    st.error(f"{command} exited with code {code}")
                st.rerun()

        st.divider()
        st.markdown("**Runs**")
        runs = run_manager.list_runs()
        if not runs:
            st.info("No runs yet")

        for r in runs:
            col1, col2 = st.columns([4, 1])
            with col1:
                label = f"{STATUS_ICONS.get(r['status'], '')} {r['id']}"
                if st.button(label, key=f"load_{r['id']}", use_container_width=True):
                    st.session_state.current_run_id = r['id']
                    st.rerun()
            with col2:
                if st.button("🗑️", key=f"del_{r['id']}", help="Delete run"):
                    run_manager.delete_run(r['id'])
                    if st.session_state.current_run_id == r['id']:
                        st.session_state.current_run_id = None
                    st.rerun()

    if st.session_state.current_run_id:
        render_run(st.session_state.current_run_id)
    else:
        st.info("Select a run in the sidebar")


if __name__ == "__main__":
    main()
